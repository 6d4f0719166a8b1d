//! Masked-patch reconstruction conditioned on the full report.
//!
//! A fixed fraction of patches is hidden. The visual encoder sees only the
//! survivors; the trunk answers one learned mask query per hidden patch
//! (tagged with that patch's position) while cross-attending over the
//! visible tokens and the complete report. The loss is mean squared error
//! against the hidden patches' true pixels, and nothing else.

use crate::config::ModelConfig;
use crate::decoder::DecoderTrunk;
use crate::encoder::{patchify, TextEmbedder, VisualEncoder};
use crate::{ModelError, Result};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use strata_tensor::{concat_rows, Binder, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Hidden patch indices, ascending.
    pub masked: Vec<usize>,
    /// The complement, ascending.
    pub visible: Vec<usize>,
}

/// Hides exactly `ceil(rate * n)` of `n` patches.
pub fn make_mask_plan<R: Rng>(n_patches: usize, rate: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(ModelError::Config(format!("mask rate {rate} outside (0, 1)")));
    }
    let count = (rate * n_patches as f64).ceil() as usize;
    if count >= n_patches {
        return Err(ModelError::Config(format!(
            "rate {rate} hides all {n_patches} patches, leaving nothing to encode"
        )));
    }
    let mut masked: Vec<usize> = index_sample(rng, n_patches, count).iter().collect();
    masked.sort_unstable();
    let mut is_masked = vec![false; n_patches];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n_patches).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { masked, visible })
}

/// MSE between predictions and the masked rows of the full target matrix.
/// Rows outside the plan never enter the loss.
pub fn masked_mse<'t, T: Scalar>(
    pred: Var<'t, T>,
    full_targets: &Tensor<T>,
    masked: &[usize],
) -> Result<Var<'t, T>> {
    if pred.rows() != masked.len() || pred.cols() != full_targets.cols() {
        return Err(ModelError::Input(format!(
            "{} predictions of width {} against {} masked rows of width {}",
            pred.rows(),
            pred.cols(),
            masked.len(),
            full_targets.cols()
        )));
    }
    let cols = full_targets.cols();
    let mut target = Tensor::zeros(masked.len(), cols);
    for (r, &src) in masked.iter().enumerate() {
        for c in 0..cols {
            target.set(r, c, full_targets.get(src, c));
        }
    }
    Ok(pred.mse(&target)?)
}

/// Full reconstruction loss for one image/report pair under a mask plan.
pub fn mim_loss<'t, T: Scalar>(
    enc: &VisualEncoder,
    emb: &TextEmbedder,
    trunk: &DecoderTrunk,
    bd: &Binder<'_, 't, T>,
    cfg: &ModelConfig,
    pixels: &[f32],
    tokens: &[u32],
    plan: &MaskPlan,
) -> Result<Var<'t, T>> {
    let f_vis = enc.encode_subset(bd, pixels, cfg, &plan.visible)?;
    let f_w = emb.embed(bd, tokens)?;
    let ctx = concat_rows(&[f_vis, f_w])?;
    let queries = trunk
        .mask_queries(bd, plan.masked.len())?
        .add(enc.position_rows(bd, &plan.masked)?)?;
    let h = trunk.forward(bd, queries, None, Some(ctx), None, None)?;
    let pred = trunk.patch_values(bd, h)?;
    masked_mse(pred, &patchify(pixels, cfg)?, &plan.masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use strata_tensor::rng::{stream, stream_indexed};
    use strata_tensor::{ParamStore, Tape};

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.d = 16;
        c.heads = 2;
        c.image_h = 16;
        c.image_w = 16;
        c.n_max = 12;
        c.vdm_k = 2;
        c.validate().unwrap();
        c // 4x4 grid, 16 patches
    }

    fn parts(c: &ModelConfig, seed: u64) -> (VisualEncoder, TextEmbedder, DecoderTrunk, ParamStore<f64>) {
        let enc = VisualEncoder::new(c);
        let emb = TextEmbedder::new(c);
        let trunk = DecoderTrunk::new(c, false);
        let mut ps = ParamStore::new(seed);
        enc.declare(&mut ps).unwrap();
        emb.declare(&mut ps).unwrap();
        trunk.declare(&mut ps).unwrap();
        (enc, emb, trunk, ps)
    }

    #[test]
    fn plan_hides_exactly_the_ceiling() {
        let mut rng = stream(1, "plan");
        let plan = make_mask_plan(64, 0.85, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 55); // ceil(0.85 * 64)
        assert_eq!(plan.visible.len(), 9);
        let plan = make_mask_plan(4, 0.1, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 1); // ceil(0.4)

        // sorted, disjoint, complete
        let plan = make_mask_plan(16, 0.5, &mut rng).unwrap();
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn plans_that_hide_everything_are_rejected() {
        let mut rng = stream(2, "plan");
        // ceil(0.9 * 4) = 4: nothing left to encode
        assert!(make_mask_plan(4, 0.9, &mut rng).is_err());
        assert!(make_mask_plan(16, 0.0, &mut rng).is_err());
        assert!(make_mask_plan(16, 1.0, &mut rng).is_err());
    }

    #[test]
    fn plans_are_deterministic_in_the_seed() {
        let a = make_mask_plan(64, 0.85, &mut stream(7, "plan")).unwrap();
        let b = make_mask_plan(64, 0.85, &mut stream(7, "plan")).unwrap();
        let c = make_mask_plan(64, 0.85, &mut stream(8, "plan")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mask_frequencies_are_uniform_across_indices() {
        let (n, rate, trials) = (16usize, 0.5f64, 10_000usize);
        let mut hits = vec![0u32; n];
        for t in 0..trials {
            let mut rng = stream_indexed(42, "plan-freq", t as u64);
            for i in make_mask_plan(n, rate, &mut rng).unwrap().masked {
                hits[i] += 1;
            }
        }
        let p = 0.5;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            assert!(
                (h as f64 - mean).abs() <= 3.0 * sigma,
                "index {i}: {h} masks vs mean {mean}"
            );
        }
    }

    #[test]
    fn loss_reads_only_masked_target_rows() {
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::full(2, 3, 0.4));
        let mut targets = Tensor::full(5, 3, 0.1);
        let masked = vec![1usize, 3];
        let base = masked_mse(pred, &targets, &masked).unwrap().item().unwrap();
        // doctor an unmasked row: nothing may change
        targets.set(0, 0, 99.0);
        targets.set(4, 2, -50.0);
        let doctored = masked_mse(pred, &targets, &masked).unwrap().item().unwrap();
        assert_eq!(base, doctored);
        // doctor a masked row: the loss must move
        targets.set(1, 0, 2.0);
        let moved = masked_mse(pred, &targets, &masked).unwrap().item().unwrap();
        assert_ne!(base, moved);
    }

    #[test]
    fn zero_prediction_of_half_gray_costs_a_quarter() {
        let c = cfg();
        let (enc, emb, trunk, mut ps) = parts(&c, 3);
        ps.set("dec.patch.w", Tensor::zeros(c.d, c.patch_dim()));
        ps.set("dec.patch.b", Tensor::zeros(1, c.patch_dim()));
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let pixels = vec![0.5f32; c.image_h * c.image_w];
        let plan = make_mask_plan(c.n_patches(), c.mim_rate, &mut stream(5, "p")).unwrap();
        let loss = mim_loss(&enc, &emb, &trunk, &bd, &c, &pixels, &[0, 5, 1], &plan)
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - 0.25).abs() < 1e-9, "loss={loss}");
    }

    #[test]
    fn perfect_reconstruction_costs_nothing() {
        let c = cfg();
        let (enc, emb, trunk, mut ps) = parts(&c, 11);
        ps.set("dec.patch.w", Tensor::zeros(c.d, c.patch_dim()));
        ps.set("dec.patch.b", Tensor::zeros(1, c.patch_dim()));
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let pixels = vec![0.0f32; c.image_h * c.image_w];
        let plan = make_mask_plan(c.n_patches(), 0.5, &mut stream(6, "p")).unwrap();
        let loss = mim_loss(&enc, &emb, &trunk, &bd, &c, &pixels, &[0, 1], &plan)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn reconstruction_is_text_conditioned() {
        let c = cfg();
        let (enc, emb, trunk, ps) = parts(&c, 13);
        let pixels: Vec<f32> = (0..256).map(|i| (i % 11) as f32 / 11.0).collect();
        let plan = make_mask_plan(c.n_patches(), c.mim_rate, &mut stream(9, "p")).unwrap();
        let run = |tokens: &[u32]| {
            let tape = Tape::new();
            let bd = Binder::new(&tape, &ps);
            mim_loss(&enc, &emb, &trunk, &bd, &c, &pixels, tokens, &plan)
                .unwrap()
                .item()
                .unwrap()
        };
        assert_ne!(run(&[0, 5, 9, 1]), run(&[0, 6, 9, 1]));
    }
}
