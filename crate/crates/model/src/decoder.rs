//! Shared decoder trunk.
//!
//! One stack of pre-norm blocks serves three roles: prefix language
//! modeling, masked-patch reconstruction, and report decoding. Each block
//! self-attends, cross-attends over an optional context, and (when built
//! for the final stage) reads two pooled mediator summaries through
//! zero-initialized cross-attention, so a freshly extended trunk computes
//! exactly what the pretrained one did.

use crate::config::ModelConfig;
use crate::Result;
use strata_tensor::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use strata_tensor::{Binder, Init, ParamStore, Scalar, Tensor, Var};

/// Residual cross-attention sub-layer whose output projection starts at
/// zero: adding it changes nothing until training moves it.
pub(crate) struct InjectLayer {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl InjectLayer {
    pub(crate) fn new(prefix: &str, d: usize, heads: usize) -> Self {
        InjectLayer {
            ln: LayerNorm::new(format!("{prefix}.ln"), d),
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), d, heads).zero_init_out(),
        }
    }

    pub(crate) fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        self.ln.declare(ps)?;
        self.attn.declare(ps)?;
        Ok(())
    }

    pub(crate) fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
        summary: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.ln.apply(bd, x)?;
        Ok(x.add(self.attn.apply(bd, h, summary, None, None)?)?)
    }
}

struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
    med_v: Option<InjectLayer>,
    med_l: Option<InjectLayer>,
}

impl DecoderBlock {
    fn new(i: usize, cfg: &ModelConfig, with_mediators: bool) -> Self {
        let p = format!("dec.block{i}");
        let (d, h) = (cfg.d, cfg.heads);
        DecoderBlock {
            ln1: LayerNorm::new(format!("{p}.ln1"), d),
            self_attn: MultiHeadAttention::new(format!("{p}.self"), d, h),
            ln2: LayerNorm::new(format!("{p}.ln2"), d),
            cross: MultiHeadAttention::new(format!("{p}.cross"), d, h),
            ln3: LayerNorm::new(format!("{p}.ln3"), d),
            ffn: FeedForward::new(format!("{p}.ffn"), d, cfg.ffn_hidden(), d),
            // mediator readers live under their own prefixes: they are new
            // parameters of the final stage, not part of the trunk transfer
            med_v: with_mediators.then(|| InjectLayer::new(&format!("vdm.inject{i}"), d, h)),
            med_l: with_mediators.then(|| InjectLayer::new(&format!("ldm.inject{i}"), d, h)),
        }
    }

    fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        self.ln1.declare(ps)?;
        self.self_attn.declare(ps)?;
        self.ln2.declare(ps)?;
        self.cross.declare(ps)?;
        self.ln3.declare(ps)?;
        self.ffn.declare(ps)?;
        if let Some(m) = &self.med_v {
            m.declare(ps)?;
        }
        if let Some(m) = &self.med_l {
            m.declare(ps)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
        mask: Option<&Tensor<T>>,
        ctx: Option<Var<'t, T>>,
        m_v: Option<Var<'t, T>>,
        m_l: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let h = self.ln1.apply(bd, x)?;
        let mut x = x.add(self.self_attn.apply(bd, h, h, mask, None)?)?;
        if let Some(c) = ctx {
            let h = self.ln2.apply(bd, x)?;
            x = x.add(self.cross.apply(bd, h, c, None, None)?)?;
        }
        if let (Some(layer), Some(mv)) = (&self.med_v, m_v) {
            x = layer.apply(bd, x, mv)?;
        }
        if let (Some(layer), Some(ml)) = (&self.med_l, m_l) {
            x = layer.apply(bd, x, ml)?;
        }
        let h = self.ln3.apply(bd, x)?;
        Ok(x.add(self.ffn.apply(bd, h)?)?)
    }
}

pub struct DecoderTrunk {
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    vocab_head: Linear,
    patch_head: Linear,
    pub d: usize,
}

impl DecoderTrunk {
    const MASK_TOKEN: &'static str = "dec.mask";

    pub fn new(cfg: &ModelConfig, with_mediators: bool) -> Self {
        DecoderTrunk {
            blocks: (0..cfg.dec_layers)
                .map(|i| DecoderBlock::new(i, cfg, with_mediators))
                .collect(),
            ln_f: LayerNorm::new("dec.ln", cfg.d),
            vocab_head: Linear::new("dec.vocab", cfg.d, cfg.vocab),
            patch_head: Linear::new("dec.patch", cfg.d, cfg.patch_dim()),
            d: cfg.d,
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        for b in &self.blocks {
            b.declare(ps)?;
        }
        self.ln_f.declare(ps)?;
        self.vocab_head.declare(ps)?;
        self.patch_head.declare(ps)?;
        ps.declare(Self::MASK_TOKEN, 1, self.d, Init::Normal(0.02))?;
        Ok(())
    }

    /// `n` copies of the learned mask token, one query row per masked patch.
    pub fn mask_queries<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        n: usize,
    ) -> Result<Var<'t, T>> {
        Ok(bd.var(Self::MASK_TOKEN)?.gather_rows(&vec![0; n])?)
    }

    /// Runs the block stack and final norm. `mask` shapes self-attention;
    /// `ctx` feeds cross-attention; mediator summaries are read only by
    /// trunks built with mediator layers.
    pub fn forward<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        mut x: Var<'t, T>,
        mask: Option<&Tensor<T>>,
        ctx: Option<Var<'t, T>>,
        m_v: Option<Var<'t, T>>,
        m_l: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        for b in &self.blocks {
            x = b.apply(bd, x, mask, ctx, m_v, m_l)?;
        }
        Ok(self.ln_f.apply(bd, x)?)
    }

    pub fn vocab_logits<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.vocab_head.apply(bd, h)?)
    }

    pub fn patch_values<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.patch_head.apply(bd, h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use strata_tensor::nn::causal_mask;
    use strata_tensor::rng::stream;
    use strata_tensor::Tape;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.d = 8;
        c.heads = 2;
        c.vocab = 11;
        c.image_h = 8;
        c.image_w = 8;
        c.vdm_k = 1;
        c.validate().unwrap();
        c
    }

    fn rand_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, "dec-test");
        let mut t = Tensor::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn forward_shapes_and_heads() {
        let c = cfg();
        let trunk = DecoderTrunk::new(&c, false);
        let mut ps = ParamStore::<f64>::new(4);
        trunk.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let x = tape.leaf(rand_rows(5, c.d, 1));
        let ctx = tape.leaf(rand_rows(3, c.d, 2));
        let h = trunk
            .forward(&bd, x, Some(&causal_mask(5)), Some(ctx), None, None)
            .unwrap();
        assert_eq!((h.rows(), h.cols()), (5, c.d));
        let logits = trunk.vocab_logits(&bd, h).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (5, c.vocab));
        let patches = trunk.patch_values(&bd, h).unwrap();
        assert_eq!((patches.rows(), patches.cols()), (5, c.patch_dim()));
    }

    #[test]
    fn causal_mask_blocks_information_from_later_rows() {
        let c = cfg();
        let trunk = DecoderTrunk::new(&c, false);
        let mut ps = ParamStore::<f64>::new(8);
        trunk.declare(&mut ps).unwrap();

        let run = |last_row_scale: f64| {
            let tape = Tape::new();
            let bd = Binder::new(&tape, &ps);
            let mut input = rand_rows(4, c.d, 3);
            for col in 0..c.d {
                let v = input.get(3, col);
                input.set(3, col, v * last_row_scale);
            }
            let x = tape.leaf(input);
            let h = trunk
                .forward(&bd, x, Some(&causal_mask(4)), None, None, None)
                .unwrap()
                .value();
            (0..3).flat_map(|r| (0..c.d).map(move |col| (r, col))).map(|(r, col)| h.get(r, col)).collect::<Vec<_>>()
        };
        assert_eq!(run(1.0), run(-2.5));
    }

    #[test]
    fn cross_attention_context_reaches_the_output() {
        let c = cfg();
        let trunk = DecoderTrunk::new(&c, false);
        let mut ps = ParamStore::<f64>::new(12);
        trunk.declare(&mut ps).unwrap();
        let run = |seed: u64| {
            let tape = Tape::new();
            let bd = Binder::new(&tape, &ps);
            let x = tape.leaf(rand_rows(4, c.d, 77));
            let ctx = tape.leaf(rand_rows(3, c.d, seed));
            trunk
                .forward(&bd, x, Some(&causal_mask(4)), Some(ctx), None, None)
                .unwrap()
                .value()
        };
        assert_ne!(run(100), run(101));
    }

    #[test]
    fn zero_initialized_mediator_readers_change_nothing() {
        let c = cfg();
        let trunk = DecoderTrunk::new(&c, true);
        let mut ps = ParamStore::<f64>::new(21);
        trunk.declare(&mut ps).unwrap();
        assert!(ps.contains("vdm.inject0.attn.wo.w"));
        assert!(ps.contains("ldm.inject1.attn.wo.w"));

        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let xv = rand_rows(4, c.d, 5);
        let ctxv = rand_rows(3, c.d, 6);
        let mv = tape.leaf(rand_rows(1, c.d, 7));
        let ml = tape.leaf(rand_rows(1, c.d, 8));

        let x1 = tape.leaf(xv.clone());
        let ctx1 = tape.leaf(ctxv.clone());
        let with = trunk
            .forward(&bd, x1, Some(&causal_mask(4)), Some(ctx1), Some(mv), Some(ml))
            .unwrap()
            .value();
        let x2 = tape.leaf(xv);
        let ctx2 = tape.leaf(ctxv);
        let without = trunk
            .forward(&bd, x2, Some(&causal_mask(4)), Some(ctx2), None, None)
            .unwrap()
            .value();
        assert_eq!(with, without);
    }

    #[test]
    fn mask_queries_repeat_the_learned_token() {
        let c = cfg();
        let trunk = DecoderTrunk::new(&c, false);
        let mut ps = ParamStore::<f64>::new(31);
        trunk.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let q = trunk.mask_queries(&bd, 3).unwrap().value();
        let tok = ps.get("dec.mask").unwrap();
        for r in 0..3 {
            for col in 0..c.d {
                assert_eq!(q.get(r, col), tok.get(0, col));
            }
        }
    }
}
