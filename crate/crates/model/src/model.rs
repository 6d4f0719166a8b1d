//! The assembled model: one parameter store, three loss surfaces.
//!
//! Construction is staged. A pretraining model owns the encoders, the
//! entity heads, and the plain decoder trunk. A final-stage model adds the
//! mediator stack and per-block mediator readers; everything it shares
//! with pretraining keeps the same parameter names, so checkpoint transfer
//! is pure name matching, and the readers start at zero so the extended
//! decoder's first forward equals the pretrained one's.

use crate::config::ModelConfig;
use crate::decoder::DecoderTrunk;
use crate::eclo::{existence_loss, existence_targets, location_loss, EntityHeads};
use crate::encoder::{TextEmbedder, VisualEncoder};
use crate::mediator::MediatorStack;
use crate::mim::{mim_loss, MaskPlan};
use crate::plm::plm_loss;
use crate::{ModelError, Result};
use rand::Rng;
use strata_tensor::nn::{causal_mask, AttnRecord};
use strata_tensor::{Binder, ParamStore, Reduction, Scalar, Tensor, Var};

/// Which mediator summaries the final stage actually injects. Disabling
/// one is the ablation lever; both stay computed so selection is stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageTwoParts {
    pub use_vdm: bool,
    pub use_ldm: bool,
}

impl StageTwoParts {
    pub fn both() -> Self {
        StageTwoParts { use_vdm: true, use_ldm: true }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub enc: VisualEncoder,
    pub emb: TextEmbedder,
    pub heads: EntityHeads,
    pub trunk: DecoderTrunk,
    mediators: Option<(MediatorStack, StageTwoParts)>,
}

impl Model {
    /// Pretraining model: encoders, entity heads, plain trunk.
    pub fn stage1(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            enc: VisualEncoder::new(&cfg),
            emb: TextEmbedder::new(&cfg),
            heads: EntityHeads::new(&cfg),
            trunk: DecoderTrunk::new(&cfg, false),
            mediators: None,
            cfg,
        })
    }

    /// Final-stage model: trunk gains zero-initialized mediator readers.
    pub fn stage2(cfg: ModelConfig, parts: StageTwoParts) -> Result<Self> {
        cfg.validate_stage2()?;
        Ok(Model {
            enc: VisualEncoder::new(&cfg),
            emb: TextEmbedder::new(&cfg),
            heads: EntityHeads::new(&cfg),
            trunk: DecoderTrunk::new(&cfg, true),
            mediators: Some((MediatorStack::new(&cfg), parts)),
            cfg,
        })
    }

    pub fn is_stage2(&self) -> bool {
        self.mediators.is_some()
    }

    pub fn parts(&self) -> Option<StageTwoParts> {
        self.mediators.as_ref().map(|(_, p)| *p)
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        self.enc.declare(ps)?;
        self.emb.declare(ps)?;
        self.heads.declare(ps)?;
        self.trunk.declare(ps)?;
        if let Some((stack, _)) = &self.mediators {
            stack.declare(ps)?;
        }
        Ok(())
    }

    pub fn new_store<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut ps = ParamStore::new(seed);
        self.declare(&mut ps)?;
        Ok(ps)
    }

    /// Entity existence plus location contrast for one sample.
    pub fn low_level_loss<'t, T: Scalar, R: Rng>(
        &self,
        bd: &Binder<'_, 't, T>,
        pixels: &[f32],
        entities: &[(usize, usize)],
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        let f_v = self.enc.encode(bd, pixels, &self.cfg, None)?;
        let pred = self.heads.predict(bd, f_v)?;
        let y = existence_targets::<T>(entities, self.cfg.num_entities)?;
        let l_cls = existence_loss(pred.s_hat, &y, self.cfg.cls_form)?;
        match location_loss(
            pred.p_hat,
            self.heads.position_table(bd)?,
            entities,
            self.cfg.eclo_negatives,
            self.cfg.loc_form,
            rng,
        )? {
            Some(l_loc) => Ok(l_cls.add(l_loc)?),
            None => Ok(l_cls),
        }
    }

    /// Masked reconstruction plus prefix language modeling, unweighted sum.
    pub fn mid_level_loss<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        pixels: &[f32],
        tokens: &[u32],
        plan: &MaskPlan,
        n_p: usize,
        no_vision: bool,
    ) -> Result<Var<'t, T>> {
        let l_mim = mim_loss(&self.enc, &self.emb, &self.trunk, bd, &self.cfg, pixels, tokens, plan)?;
        let f_v = if no_vision {
            None
        } else {
            Some(self.enc.encode(bd, pixels, &self.cfg, None)?)
        };
        let l_plm = plm_loss(&self.trunk, &self.emb, bd, f_v, tokens, n_p)?;
        Ok(l_mim.add(l_plm)?)
    }

    /// Teacher-forced report logits without mediators: the pretraining
    /// decoder exactly as the final stage inherits it.
    fn trunk_report_logits<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        f_v: Var<'t, T>,
        tokens: &[u32],
        m_v: Option<Var<'t, T>>,
        m_l: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let n = tokens.len();
        if n < 2 {
            return Err(ModelError::Input(format!("report of {n} tokens cannot be scored")));
        }
        let x = self.emb.embed(bd, &tokens[..n - 1])?;
        let mask = causal_mask::<T>(n - 1);
        let h = self.trunk.forward(bd, x, Some(&mask), Some(f_v), m_v, m_l)?;
        self.trunk.vocab_logits(bd, h)
    }

    /// Summed teacher-forcing cross-entropy without mediators.
    pub fn stage1_nll<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        pixels: &[f32],
        tokens: &[u32],
    ) -> Result<Var<'t, T>> {
        let f_v = self.enc.encode(bd, pixels, &self.cfg, None)?;
        let logits = self.trunk_report_logits(bd, f_v, tokens, None, None)?;
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        Ok(logits.cross_entropy(&targets, Reduction::Sum)?)
    }

    /// Mediator-injected report logits for one sample.
    pub fn high_level_logits<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        pixels: &[f32],
        tokens: &[u32],
    ) -> Result<Var<'t, T>> {
        let (stack, parts) = self
            .mediators
            .as_ref()
            .ok_or_else(|| ModelError::Config("high-level pass needs a final-stage model".into()))?;
        let mut record = AttnRecord::new();
        let f_v = self.enc.encode(bd, pixels, &self.cfg, Some(&mut record))?;
        let med = stack.mediators(bd, &self.cfg, f_v, &record, &self.emb)?;
        let m_v = parts.use_vdm.then_some(med.m_v_hat);
        let m_l = parts.use_ldm.then_some(med.m_l_hat);
        self.trunk_report_logits(bd, f_v, tokens, m_v, m_l)
    }

    /// Summed teacher-forcing cross-entropy with mediator injection.
    pub fn high_level_loss<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        pixels: &[f32],
        tokens: &[u32],
    ) -> Result<Var<'t, T>> {
        let logits = self.high_level_logits(bd, pixels, tokens)?;
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        Ok(logits.cross_entropy(&targets, Reduction::Sum)?)
    }

    /// Pooled mediator summaries for one image, as plain tensors. The
    /// signature is the provenance guarantee: no report enters.
    pub fn mediator_summaries<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pixels: &[f32],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (stack, _) = self
            .mediators
            .as_ref()
            .ok_or_else(|| ModelError::Config("mediators need a final-stage model".into()))?;
        let tape = strata_tensor::Tape::new();
        let bd = Binder::new(&tape, store);
        let mut record = AttnRecord::new();
        let f_v = self.enc.encode(&bd, pixels, &self.cfg, Some(&mut record))?;
        let med = stack.mediators(&bd, &self.cfg, f_v, &record, &self.emb)?;
        Ok((med.m_v_hat.value(), med.m_l_hat.value()))
    }

    /// Logits for the next token after `prefix`, greedily usable. Runs the
    /// full per-step forward (and mediators, on a final-stage model).
    pub fn step_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pixels: &[f32],
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(ModelError::Input("generation needs a start token".into()));
        }
        if prefix.len() >= self.cfg.n_max {
            return Err(ModelError::Input(format!(
                "prefix of {} tokens leaves no room under n_max={}",
                prefix.len(),
                self.cfg.n_max
            )));
        }
        let tape = strata_tensor::Tape::new();
        let bd = Binder::new(&tape, store);
        let x = self.emb.embed(&bd, prefix)?;
        let mask = causal_mask::<T>(prefix.len());
        let h = match &self.mediators {
            None => {
                let f_v = self.enc.encode(&bd, pixels, &self.cfg, None)?;
                self.trunk.forward(&bd, x, Some(&mask), Some(f_v), None, None)?
            }
            Some((stack, parts)) => {
                let mut record = AttnRecord::new();
                let f_v = self.enc.encode(&bd, pixels, &self.cfg, Some(&mut record))?;
                let med = stack.mediators(&bd, &self.cfg, f_v, &record, &self.emb)?;
                let m_v = parts.use_vdm.then_some(med.m_v_hat);
                let m_l = parts.use_ldm.then_some(med.m_l_hat);
                self.trunk.forward(&bd, x, Some(&mask), Some(f_v), m_v, m_l)?
            }
        };
        let logits = self.trunk.vocab_logits(&bd, h)?.value();
        let last = logits.rows() - 1;
        Ok((0..logits.cols()).map(|c| logits.get(last, c).to_f64()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mim::make_mask_plan;
    use strata_tensor::rng::stream;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.d = 16;
        c.heads = 2;
        c.enc_layers = 2;
        c.dec_layers = 2;
        c.ffn_mult = 2;
        c.image_h = 16;
        c.image_w = 16;
        c.vocab = 24;
        c.n_max = 12;
        c.num_entities = 4;
        c.num_positions = 8;
        c.eclo_negatives = 3;
        c.vdm_k = 2;
        c.validate_stage2().unwrap();
        c
    }

    fn sample_pixels(seed: u64, len: usize) -> Vec<f32> {
        let mut rng = stream(seed, "pix");
        (0..len).map(|_| rng.random_range(0.0f32..1.0)).collect()
    }

    #[test]
    fn stage1_parameters_live_under_the_shared_prefixes() {
        let c = tiny_cfg();
        let m1 = Model::stage1(c.clone()).unwrap();
        let ps1 = m1.new_store::<f32>(7).unwrap();
        for name in ps1.names() {
            assert!(
                name.starts_with("enc.") || name.starts_with("dec.") || name.starts_with("eclo."),
                "unexpected pretraining parameter {name}"
            );
        }

        let m2 = Model::stage2(c, StageTwoParts::both()).unwrap();
        let ps2 = m2.new_store::<f32>(7).unwrap();
        // everything stage 1 has, stage 2 has with identical shapes
        for (name, t) in ps1.iter() {
            let t2 = ps2.get(name).unwrap_or_else(|| panic!("stage 2 is missing {name}"));
            assert_eq!(t.shape(), t2.shape(), "{name}");
        }
        // and the additions are exactly the mediator machinery
        for name in ps2.names() {
            if !ps1.contains(name) {
                assert!(
                    name.starts_with("vdm.") || name.starts_with("ldm."),
                    "unexpected new parameter {name}"
                );
            }
        }
    }

    #[test]
    fn stage1_losses_are_finite_and_deterministic() {
        let c = tiny_cfg();
        let m = Model::stage1(c.clone()).unwrap();
        let ps = m.new_store::<f32>(13).unwrap();
        let pixels = sample_pixels(1, c.image_h * c.image_w);
        let tokens = [0u32, 5, 9, 12, 1];
        let entities = [(0usize, 3usize), (2, 5)];

        let run = || -> (f32, f32) {
            let tape = strata_tensor::Tape::new();
            let bd = Binder::new(&tape, &ps);
            let mut rng = stream(3, "loc");
            let low = m.low_level_loss(&bd, &pixels, &entities, &mut rng).unwrap();
            let plan = make_mask_plan(c.n_patches(), c.mim_rate, &mut stream(4, "plan")).unwrap();
            let mid = m.mid_level_loss(&bd, &pixels, &tokens, &plan, 2, false).unwrap();
            (low.item().unwrap(), mid.item().unwrap())
        };
        let (low_a, mid_a) = run();
        let (low_b, mid_b) = run();
        assert!(low_a.is_finite() && mid_a.is_finite());
        assert!(low_a > 0.0 && mid_a > 0.0);
        // bitwise reproducibility on the same store and draws
        assert_eq!(low_a.to_bits(), low_b.to_bits());
        assert_eq!(mid_a.to_bits(), mid_b.to_bits());
    }

    #[test]
    fn fresh_stage2_reduces_exactly_to_the_trunk_decoder() {
        let c = tiny_cfg();
        let m = Model::stage2(c.clone(), StageTwoParts::both()).unwrap();
        let ps = m.new_store::<f64>(19).unwrap();
        let pixels = sample_pixels(2, c.image_h * c.image_w);
        let tokens = [0u32, 7, 3, 3, 11, 1];

        let tape = strata_tensor::Tape::new();
        let bd = Binder::new(&tape, &ps);
        let with = m.high_level_loss(&bd, &pixels, &tokens).unwrap().item().unwrap();
        let without = m.stage1_nll(&bd, &pixels, &tokens).unwrap().item().unwrap();
        assert!(
            (with - without).abs() <= 1e-6,
            "zero-initialized readers moved the loss: {with} vs {without}"
        );
    }

    #[test]
    fn uniform_head_costs_ln_vocab_per_predicted_token() {
        let c = tiny_cfg();
        let m = Model::stage2(c.clone(), StageTwoParts::both()).unwrap();
        let mut ps = m.new_store::<f64>(23).unwrap();
        ps.set("dec.vocab.w", Tensor::zeros(c.d, c.vocab));
        ps.set("dec.vocab.b", Tensor::zeros(1, c.vocab));
        let pixels = sample_pixels(3, c.image_h * c.image_w);
        let tokens = [0u32, 2, 9, 14, 1]; // 4 predicted tokens

        let tape = strata_tensor::Tape::new();
        let bd = Binder::new(&tape, &ps);
        let loss = m.high_level_loss(&bd, &pixels, &tokens).unwrap().item().unwrap();
        let want = 4.0 * (c.vocab as f64).ln();
        assert!((loss - want).abs() < 1e-9, "loss={loss}, want={want}");
    }

    #[test]
    fn high_level_loss_matches_a_direct_cross_entropy() {
        let c = tiny_cfg();
        let m = Model::stage2(c.clone(), StageTwoParts::both()).unwrap();
        let ps = m.new_store::<f64>(29).unwrap();
        let pixels = sample_pixels(4, c.image_h * c.image_w);
        let tokens = [0u32, 8, 15, 2, 20, 1];

        let tape = strata_tensor::Tape::new();
        let bd = Binder::new(&tape, &ps);
        let logits = m.high_level_logits(&bd, &pixels, &tokens).unwrap();
        let loss = m.high_level_loss(&bd, &pixels, &tokens).unwrap().item().unwrap();

        let lv = logits.value();
        let mut want = 0.0;
        for (r, &target) in tokens[1..].iter().enumerate() {
            let row: Vec<f64> = (0..lv.cols()).map(|col| lv.get(r, col)).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            want += lse - row[target as usize];
        }
        assert!((loss - want).abs() <= 1e-12, "loss={loss}, want={want}");
    }

    #[test]
    fn mediator_summaries_depend_on_the_image_alone() {
        let c = tiny_cfg();
        let m = Model::stage2(c.clone(), StageTwoParts::both()).unwrap();
        let ps = m.new_store::<f64>(31).unwrap();
        let img_a = sample_pixels(5, c.image_h * c.image_w);
        let img_b = sample_pixels(6, c.image_h * c.image_w);

        let (va1, la1) = m.mediator_summaries(&ps, &img_a).unwrap();
        let (va2, la2) = m.mediator_summaries(&ps, &img_a).unwrap();
        let (vb, lb) = m.mediator_summaries(&ps, &img_b).unwrap();
        assert_eq!(va1, va2);
        assert_eq!(la1, la2);
        assert_ne!(va1, vb);
        assert_ne!(la1, lb);
    }

    #[test]
    fn step_logits_bound_checks_the_prefix() {
        let c = tiny_cfg();
        let m = Model::stage1(c.clone()).unwrap();
        let ps = m.new_store::<f32>(37).unwrap();
        let pixels = sample_pixels(7, c.image_h * c.image_w);
        assert!(m.step_logits(&ps, &pixels, &[]).is_err());
        let too_long: Vec<u32> = vec![0; c.n_max];
        assert!(m.step_logits(&ps, &pixels, &too_long).is_err());
        let logits = m.step_logits(&ps, &pixels, &[0, 4]).unwrap();
        assert_eq!(logits.len(), c.vocab);
    }
}
