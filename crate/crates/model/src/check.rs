//! Whole-model finite-difference gradient validation at 64-bit.
//!
//! A combined scalar (low + mid + high losses over a two-sample batch on
//! one tape) is differentiated analytically, then compared against
//! central differences for sampled entries of every parameter. The
//! relative-error denominator is floored at 1, matching the op-level
//! suite in the tensor crate.

use rand::Rng;

use strata_tensor::rng::stream;
use strata_tensor::{Binder, GradAccum, ParamStore, Tape, Var};

use crate::mim::{make_mask_plan, MaskPlan};
use crate::model::{Model, StageTwoParts};
use crate::config::ModelConfig;
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub params: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

/// Reduced dimensions that still exercise every architectural piece:
/// multi-head attention, both encoder/decoder stacks, both mediators.
pub fn reduced_check_config() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.d = 8;
    c.heads = 2;
    c.enc_layers = 2;
    c.dec_layers = 2;
    c.ffn_mult = 2;
    c.image_h = 16;
    c.image_w = 16;
    c.vocab = 12;
    c.n_max = 8;
    c.num_entities = 3;
    c.num_positions = 6;
    c.eclo_negatives = 2;
    c.vdm_k = 2;
    c.validate_stage2().expect("reduced config is valid");
    c
}

struct Sample {
    pixels: Vec<f32>,
    tokens: Vec<u32>,
    entities: Vec<(usize, usize)>,
    plan: MaskPlan,
    n_p: usize,
}

struct Fixture {
    model: Model,
    samples: Vec<Sample>,
}

impl Fixture {
    /// Two-sample batch so batch accumulation is inside the checked graph.
    fn new() -> Result<Self> {
        let cfg = reduced_check_config();
        let model = Model::stage2(cfg.clone(), StageTwoParts::both())?;
        let mut rng = stream(2024, "fd-input");
        let mut sample = |tokens: Vec<u32>,
                          entities: Vec<(usize, usize)>,
                          n_p: usize|
         -> Result<Sample> {
            Ok(Sample {
                pixels: (0..cfg.image_h * cfg.image_w)
                    .map(|_| rng.random_range(0.0f32..1.0))
                    .collect(),
                tokens,
                entities,
                plan: make_mask_plan(cfg.n_patches(), 0.5, &mut rng)?,
                n_p,
            })
        };
        let samples = vec![
            sample(vec![0, 5, 9, 3, 11, 1], vec![(0, 2), (2, 5)], 2)?,
            sample(vec![0, 7, 2, 10, 1], vec![(1, 0)], 3)?,
        ];
        Ok(Fixture { model, samples })
    }

    /// Batch total of low + mid + high on one tape. Negative draws are
    /// reseeded per call so every evaluation scores the same contrast.
    fn batch_total<'t>(&self, bd: &Binder<'_, 't, f64>) -> Result<Var<'t, f64>> {
        let mut loc_rng = stream(55, "fd-negatives");
        let mut total: Option<Var<'t, f64>> = None;
        for s in &self.samples {
            let low = self
                .model
                .low_level_loss(bd, &s.pixels, &s.entities, &mut loc_rng)?;
            let mid = self
                .model
                .mid_level_loss(bd, &s.pixels, &s.tokens, &s.plan, s.n_p, false)?;
            let high = self.model.high_level_loss(bd, &s.pixels, &s.tokens)?;
            let item = low.add(mid)?.add(high)?;
            total = Some(match total {
                None => item,
                Some(t) => t.add(item)?,
            });
        }
        Ok(total.expect("fixture has samples"))
    }

    fn loss(&self, ps: &ParamStore<f64>) -> Result<f64> {
        let tape = Tape::new();
        let bd = Binder::new(&tape, ps);
        Ok(self.batch_total(&bd)?.item()?)
    }

    fn analytic_grads(&self, ps: &ParamStore<f64>) -> Result<GradAccum<f64>> {
        let tape = Tape::new();
        let bd = Binder::new(&tape, ps);
        let total = self.batch_total(&bd)?;
        let grads = tape.backward(total)?;
        let mut accum = GradAccum::new();
        bd.collect(&grads, &mut accum);
        Ok(accum)
    }
}

/// Checks `entries_per_param` sampled entries of every parameter against
/// central differences and returns the worst relative error seen. The
/// caller asserts against [`FD_TOLERANCE`].
pub fn full_model_fd_check(entries_per_param: usize, seed: u64) -> Result<FdReport> {
    let fx = Fixture::new()?;
    let ps = fx.model.new_store::<f64>(101)?;
    let analytic = fx.analytic_grads(&ps)?;

    let names: Vec<String> = ps.names().map(String::from).collect();
    let mut rng = stream(seed, "fd-entries");
    let mut entries = 0usize;
    let mut max_rel_err = 0.0f64;
    for name in &names {
        let base = ps.get(name).expect("store lists its own names").clone();
        let n = entries_per_param.min(base.rows() * base.cols());
        for _ in 0..n {
            let r = rng.random_range(0..base.rows());
            let c = rng.random_range(0..base.cols());

            let mut plus = ps.clone();
            let mut t = base.clone();
            t.set(r, c, base.get(r, c) + FD_STEP);
            plus.set(name, t);

            let mut minus = ps.clone();
            let mut t = base.clone();
            t.set(r, c, base.get(r, c) - FD_STEP);
            minus.set(name, t);

            let fd = (fx.loss(&plus)? - fx.loss(&minus)?) / (2.0 * FD_STEP);
            let an = analytic.get(name).map(|g| g.get(r, c)).unwrap_or(0.0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            entries += 1;
        }
    }
    Ok(FdReport {
        params: names.len(),
        entries,
        max_rel_err,
    })
}
