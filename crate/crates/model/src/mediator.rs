//! Mediator construction for intervention-style decoding.
//!
//! The decoder should respond to what the image actually contains, not to
//! co-occurrence habits picked up from training reports. Two summaries
//! approximate that intervention:
//!
//! * visual: the k patch tokens that received the most encoder attention,
//!   fused with a pooled global view of the whole image;
//! * language: the same local tokens re-expressed through the vocabulary
//!   embedding table, so the summary lives in word space but its content
//!   still comes only from the image.
//!
//! Both are pooled to a single row by a learned query and injected into
//! every decoder block.

use crate::config::{AccumMode, ConcatAxis, ModelConfig};
use crate::encoder::TextEmbedder;
use crate::{ModelError, Result};
use strata_tensor::nn::{AttnRecord, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use strata_tensor::{concat_cols, concat_rows, Binder, Init, ParamStore, Scalar, Var};

/// Indices of the k largest scores; ties prefer the lower index, and the
/// result is ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k <= scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Attention received by each key position, combined across recorded
/// layers. Each map is `Lq x Lk`; a position's per-layer score is its
/// column sum.
pub fn received_attention<T: Scalar>(record: &AttnRecord<T>, accum: AccumMode) -> Result<Vec<f64>> {
    let Some(first) = record.maps.first() else {
        return Err(ModelError::Input("no attention maps recorded".into()));
    };
    let n = first.cols();
    let mut combined = vec![
        match accum {
            AccumMode::Sum => 0.0,
            AccumMode::Product => 1.0,
        };
        n
    ];
    for map in &record.maps {
        if map.cols() != n {
            return Err(ModelError::Input("attention maps disagree on key count".into()));
        }
        for j in 0..n {
            let col: f64 = (0..map.rows()).map(|i| map.get(i, j).to_f64()).sum();
            match accum {
                AccumMode::Sum => combined[j] += col,
                AccumMode::Product => combined[j] *= col,
            }
        }
    }
    Ok(combined)
}

/// Learned-query attention pooling to a single row.
struct PoolHead {
    query: String,
    attn: MultiHeadAttention,
    d: usize,
}

impl PoolHead {
    fn new(prefix: &str, d: usize, heads: usize) -> Self {
        PoolHead {
            query: format!("{prefix}.q"),
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), d, heads),
            d,
        }
    }

    fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        ps.declare(&self.query, 1, self.d, Init::Normal(0.02))?;
        self.attn.declare(ps)?;
        Ok(())
    }

    fn apply<'t, T: Scalar>(&self, bd: &Binder<'_, 't, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
        let q = bd.var(&self.query)?;
        Ok(self.attn.apply(bd, q, m, None, None)?)
    }
}

pub struct MediatorStack {
    global_ln: LayerNorm,
    global_attn: MultiHeadAttention,
    global_lin: Linear,
    fuse_self: MultiHeadAttention,
    fuse_cross: MultiHeadAttention,
    fuse_ffn: FeedForward,
    recon_attn: MultiHeadAttention,
    recon_ffn: FeedForward,
    med_attn: MultiHeadAttention,
    med_ffn: FeedForward,
    pool_v: PoolHead,
    pool_l: PoolHead,
    pub k: usize,
    accum: AccumMode,
    concat: ConcatAxis,
}

/// Pooled mediator summaries plus the local-token choice that produced them.
pub struct Mediators<'t, T: Scalar> {
    pub m_v_hat: Var<'t, T>,
    pub m_l_hat: Var<'t, T>,
    pub selected: Vec<usize>,
}

impl MediatorStack {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.d, cfg.heads);
        let hidden = cfg.ffn_hidden();
        let fuse_in = match cfg.vdm_concat {
            ConcatAxis::Feature => 2 * d,
            ConcatAxis::Token => d,
        };
        MediatorStack {
            global_ln: LayerNorm::new("vdm.global.ln", d),
            global_attn: MultiHeadAttention::new("vdm.global.attn", d, h),
            global_lin: Linear::new("vdm.global.lin", d, d),
            fuse_self: MultiHeadAttention::new("vdm.fuse.self", d, h),
            fuse_cross: MultiHeadAttention::new("vdm.fuse.cross", d, h),
            fuse_ffn: FeedForward::new("vdm.fuse.ffn", fuse_in, hidden, d),
            recon_attn: MultiHeadAttention::new("ldm.recon.attn", d, h),
            recon_ffn: FeedForward::new("ldm.recon.ffn", d, hidden, d),
            med_attn: MultiHeadAttention::new("ldm.med.attn", d, h),
            med_ffn: FeedForward::new("ldm.med.ffn", d, hidden, d),
            pool_v: PoolHead::new("vdm.pool", d, h),
            pool_l: PoolHead::new("ldm.pool", d, h),
            k: cfg.vdm_k,
            accum: cfg.vdm_accum,
            concat: cfg.vdm_concat,
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        self.global_ln.declare(ps)?;
        self.global_attn.declare(ps)?;
        self.global_lin.declare(ps)?;
        self.fuse_self.declare(ps)?;
        self.fuse_cross.declare(ps)?;
        self.fuse_ffn.declare(ps)?;
        self.recon_attn.declare(ps)?;
        self.recon_ffn.declare(ps)?;
        self.med_attn.declare(ps)?;
        self.med_ffn.declare(ps)?;
        self.pool_v.declare(ps)?;
        self.pool_l.declare(ps)?;
        Ok(())
    }

    /// Global view: max-pooled tokens plus self-attention over max-pooled
    /// normalized tokens, through a final linear map. `(N/4) x d`.
    pub fn global_feature<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        f_v: Var<'t, T>,
        gh: usize,
        gw: usize,
    ) -> Result<Var<'t, T>> {
        let direct = f_v.maxpool2d(gh, gw)?;
        let normed = self.global_ln.apply(bd, f_v)?.maxpool2d(gh, gw)?;
        let attended = self.global_attn.apply(bd, normed, normed, None, None)?;
        Ok(self.global_lin.apply(bd, direct.add(attended)?)?)
    }

    /// Visual mediator: local tokens attend to themselves and to the global
    /// view; the branches are concatenated and fused.
    pub fn visual_mediator<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        f_vl: Var<'t, T>,
        f_vg: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let local = self.fuse_self.apply(bd, f_vl, f_vl, None, None)?;
        let global = self.fuse_cross.apply(bd, f_vl, f_vg, None, None)?;
        let joined = match self.concat {
            ConcatAxis::Feature => concat_cols(&[local, global])?,
            ConcatAxis::Token => concat_rows(&[local, global])?,
        };
        Ok(self.fuse_ffn.apply(bd, joined)?)
    }

    /// Re-expresses local visual tokens through the vocabulary table.
    pub fn vocab_reconstruct<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        f_vl: Var<'t, T>,
        w_hat: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let x = self.recon_attn.apply(bd, f_vl, w_hat, None, None)?;
        Ok(self.recon_ffn.apply(bd, x)?)
    }

    /// Language mediator over the reconstructed tokens.
    pub fn language_mediator<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        f_vl_prime: Var<'t, T>,
        f_vl: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let x = self.med_attn.apply(bd, f_vl_prime, f_vl, None, None)?;
        Ok(self.med_ffn.apply(bd, x)?)
    }

    /// Builds both pooled mediators from one encoded image. Text never
    /// enters: the only language-side input is the embedding table itself.
    pub fn mediators<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        cfg: &ModelConfig,
        f_v: Var<'t, T>,
        record: &AttnRecord<T>,
        emb: &TextEmbedder,
    ) -> Result<Mediators<'t, T>> {
        let scores = received_attention(record, self.accum)?;
        if self.k > scores.len() {
            return Err(ModelError::Config(format!(
                "k={} local tokens from {} patches",
                self.k,
                scores.len()
            )));
        }
        let selected = top_k_indices(&scores, self.k);
        let f_vl = f_v.gather_rows(&selected)?;
        let f_vg = self.global_feature(bd, f_v, cfg.grid_h(), cfg.grid_w())?;
        let m_v = self.visual_mediator(bd, f_vl, f_vg)?;
        let f_vl_prime = self.vocab_reconstruct(bd, f_vl, emb.table(bd)?)?;
        let m_l = self.language_mediator(bd, f_vl_prime, f_vl)?;
        Ok(Mediators {
            m_v_hat: self.pool_v.apply(bd, m_v)?,
            m_l_hat: self.pool_l.apply(bd, m_l)?,
            selected,
        })
    }
}
