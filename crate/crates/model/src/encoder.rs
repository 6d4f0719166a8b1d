//! Patch embedding and the two modality encoders.
//!
//! Parameter names are the transfer contract: everything the second training
//! stage inherits lives under `enc.` (and the decoder trunk under `dec.`),
//! so checkpoint loading can match by prefix.

use crate::config::ModelConfig;
use crate::{ModelError, Result};
use strata_tensor::nn::{
    AttnRecord, FeedForward, LayerNorm, LearnedPos1d, LearnedPos2d, Linear, MultiHeadAttention,
};
use strata_tensor::{Binder, Init, ParamStore, Scalar, Tensor, Var};

/// Splits a row-major `H x W x C` pixel buffer into flattened patch rows.
/// Patch `(pr, pc)` becomes row `pr * grid_w + pc`; within a patch, values
/// keep (row, col, channel) order.
pub fn patchify<T: Scalar>(pixels: &[f32], cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (h, w, c, p) = (cfg.image_h, cfg.image_w, cfg.channels, cfg.patch);
    if pixels.len() != h * w * c {
        return Err(ModelError::Input(format!(
            "image has {} values, expected {h}x{w}x{c}",
            pixels.len()
        )));
    }
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut out = Tensor::zeros(gh * gw, cfg.patch_dim());
    for pr in 0..gh {
        for pc in 0..gw {
            let row = pr * gw + pc;
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        let (y, x) = (pr * p + dy, pc * p + dx);
                        out.set(row, k, T::from_f64(pixels[(y * w + x) * c + ch] as f64));
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pre-norm transformer block: attention and FFN, each behind a residual.
pub(crate) struct EncBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncBlock {
    pub(crate) fn new(prefix: &str, d: usize, heads: usize, hidden: usize) -> Self {
        EncBlock {
            ln1: LayerNorm::new(format!("{prefix}.ln1"), d),
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), d, heads),
            ln2: LayerNorm::new(format!("{prefix}.ln2"), d),
            ffn: FeedForward::new(format!("{prefix}.ffn"), d, hidden, d),
        }
    }

    pub(crate) fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        self.ln1.declare(ps)?;
        self.attn.declare(ps)?;
        self.ln2.declare(ps)?;
        self.ffn.declare(ps)?;
        Ok(())
    }

    pub(crate) fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
        record: Option<&mut AttnRecord<T>>,
    ) -> Result<Var<'t, T>> {
        let h = self.ln1.apply(bd, x)?;
        let x = x.add(self.attn.apply(bd, h, h, None, record)?)?;
        let h = self.ln2.apply(bd, x)?;
        Ok(x.add(self.ffn.apply(bd, h)?)?)
    }
}

/// Patch projection, 2-D positions, encoder blocks, final norm.
pub struct VisualEncoder {
    proj: Linear,
    pos: LearnedPos2d,
    blocks: Vec<EncBlock>,
    ln_f: LayerNorm,
}

impl VisualEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        VisualEncoder {
            proj: Linear::new("enc.vis.patch", cfg.patch_dim(), cfg.d),
            pos: LearnedPos2d::new("enc.vis.pos", cfg.grid_h(), cfg.grid_w(), cfg.d),
            blocks: (0..cfg.enc_layers)
                .map(|i| EncBlock::new(&format!("enc.vis.block{i}"), cfg.d, cfg.heads, cfg.ffn_hidden()))
                .collect(),
            ln_f: LayerNorm::new("enc.vis.ln", cfg.d),
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        self.proj.declare(ps)?;
        self.pos.declare(ps)?;
        for b in &self.blocks {
            b.declare(ps)?;
        }
        self.ln_f.declare(ps)?;
        Ok(())
    }

    /// Patch rows through the linear stem only, before positions or blocks.
    pub fn embed_patches<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        patches: Tensor<T>,
    ) -> Result<Var<'t, T>> {
        let x = bd.tape().leaf(patches);
        Ok(self.proj.apply(bd, x)?)
    }

    /// Full-image encoding: `N x d` visual tokens. When `record` is given,
    /// each block appends its head-averaged attention map (one per layer).
    pub fn encode<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        pixels: &[f32],
        cfg: &ModelConfig,
        mut record: Option<&mut AttnRecord<T>>,
    ) -> Result<Var<'t, T>> {
        let mut x = self.embed_patches(bd, patchify(pixels, cfg)?)?;
        x = self.pos.apply(bd, x)?;
        for b in &self.blocks {
            x = b.apply(bd, x, record.as_deref_mut())?;
        }
        Ok(self.ln_f.apply(bd, x)?)
    }

    /// Positional rows for arbitrary grid cells, for decoder-side queries
    /// that must name the patch they reconstruct.
    pub fn position_rows<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        cells: &[usize],
    ) -> Result<Var<'t, T>> {
        Ok(self.pos.lookup(bd, cells)?)
    }

    /// Encodes only the listed patch indices (for masked reconstruction).
    /// Positions come from each kept patch's true grid cell.
    pub fn encode_subset<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        pixels: &[f32],
        cfg: &ModelConfig,
        visible: &[usize],
    ) -> Result<Var<'t, T>> {
        if visible.is_empty() {
            return Err(ModelError::Input("no visible patches to encode".into()));
        }
        let all = bd.tape().leaf(patchify(pixels, cfg)?);
        let kept = all.gather_rows(visible)?;
        let mut x = self.proj.apply(bd, kept)?;
        x = x.add(self.pos.lookup(bd, visible)?)?;
        for b in &self.blocks {
            x = b.apply(bd, x, None)?;
        }
        Ok(self.ln_f.apply(bd, x)?)
    }
}

/// Token embedding table plus learned 1-D positions.
pub struct TextEmbedder {
    pos: LearnedPos1d,
    pub vocab: usize,
    pub d: usize,
}

impl TextEmbedder {
    const TABLE: &'static str = "enc.txt.emb";

    pub fn new(cfg: &ModelConfig) -> Self {
        TextEmbedder {
            pos: LearnedPos1d::new("enc.txt", cfg.n_max, cfg.d),
            vocab: cfg.vocab,
            d: cfg.d,
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        ps.declare(Self::TABLE, self.vocab, self.d, Init::Normal(0.02))?;
        self.pos.declare(ps)?;
        Ok(())
    }

    /// The raw `vocab x d` table, for heads that attend over word vectors.
    pub fn table<'t, T: Scalar>(&self, bd: &Binder<'_, 't, T>) -> Result<Var<'t, T>> {
        Ok(bd.var(Self::TABLE)?)
    }

    /// `n x d` embeddings with positions added.
    pub fn embed<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        tokens: &[u32],
    ) -> Result<Var<'t, T>> {
        if tokens.is_empty() {
            return Err(ModelError::Input("cannot embed an empty token sequence".into()));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab) {
            return Err(ModelError::Input(format!(
                "token id {bad} outside vocab of {}",
                self.vocab
            )));
        }
        let x = self.table(bd)?.gather_rows(&ids)?;
        Ok(self.pos.apply(bd, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use strata_tensor::Tape;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.d = 8;
        cfg.heads = 2;
        cfg.image_h = 8;
        cfg.image_w = 8;
        cfg.patch = 4; // 2x2 grid, 4 patches
        cfg.vdm_k = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn patchify_places_pixels_in_patch_row_order() {
        let cfg = tiny_cfg();
        let mut pixels = vec![0.0f32; 64];
        // pixel (y=5, x=2) lives in patch (1, 0) = row 2, offset (1*4+2) = 6
        pixels[5 * 8 + 2] = 0.7;
        let m: Tensor<f64> = patchify(&pixels, &cfg).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 16));
        assert_eq!(m.get(2, 6), 0.7f32 as f64);
        let nonzero = m.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn patchify_rejects_wrong_length() {
        let cfg = tiny_cfg();
        assert!(patchify::<f64>(&vec![0.0; 63], &cfg).is_err());
    }

    #[test]
    fn zero_image_gives_identical_patch_embeddings() {
        let cfg = tiny_cfg();
        let enc = VisualEncoder::new(&cfg);
        let mut ps = ParamStore::<f64>::new(11);
        enc.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let e = enc
            .embed_patches(&bd, patchify(&vec![0.0f32; 64], &cfg).unwrap())
            .unwrap()
            .value();
        for r in 1..e.rows() {
            for c in 0..e.cols() {
                assert_eq!(e.get(r, c), e.get(0, c));
            }
        }
    }

    #[test]
    fn encode_shapes_and_attention_records() {
        let cfg = tiny_cfg();
        let enc = VisualEncoder::new(&cfg);
        let mut ps = ParamStore::<f64>::new(3);
        enc.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let pixels: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut rec = AttnRecord::new();
        let f_v = enc.encode(&bd, &pixels, &cfg, Some(&mut rec)).unwrap();
        assert_eq!((f_v.rows(), f_v.cols()), (4, 8));
        assert_eq!(rec.maps.len(), cfg.enc_layers);
        for map in &rec.maps {
            assert_eq!((map.rows(), map.cols()), (4, 4));
            for r in 0..4 {
                let s: f64 = (0..4).map(|c| map.get(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-9, "attention row sums to {s}");
            }
        }
    }

    #[test]
    fn subset_encoding_matches_row_count_and_uses_true_cells() {
        let cfg = tiny_cfg();
        let enc = VisualEncoder::new(&cfg);
        let mut ps = ParamStore::<f64>::new(7);
        enc.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let pixels: Vec<f32> = (0..64).map(|i| (i % 5) as f32 / 5.0).collect();
        let sub = enc.encode_subset(&bd, &pixels, &cfg, &[1, 3]).unwrap();
        assert_eq!((sub.rows(), sub.cols()), (2, 8));
        assert!(enc.encode_subset(&bd, &pixels, &cfg, &[]).is_err());
    }

    #[test]
    fn token_embeddings_add_positions() {
        let cfg = tiny_cfg();
        let emb = TextEmbedder::new(&cfg);
        let mut ps = ParamStore::<f64>::new(19);
        emb.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        // the same token at two positions differs by exactly pos[1]-pos[0]
        let e = emb.embed(&bd, &[5, 5]).unwrap().value();
        let pos = ps.get("enc.txt.pos").unwrap();
        for c in 0..cfg.d {
            let diff = e.get(1, c) - e.get(0, c);
            assert!((diff - (pos.get(1, c) - pos.get(0, c))).abs() < 1e-12);
        }
        assert!(emb.embed(&bd, &[cfg.vocab as u32]).is_err());
        assert!(emb.embed(&bd, &[]).is_err());
    }

    #[test]
    fn embedding_gradients_touch_only_used_rows() {
        let cfg = tiny_cfg();
        let emb = TextEmbedder::new(&cfg);
        let mut ps = ParamStore::<f64>::new(23);
        emb.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let loss = emb.embed(&bd, &[3, 9]).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(bd.var("enc.txt.emb").unwrap()).unwrap();
        for r in 0..cfg.vocab {
            let touched = (0..cfg.d).any(|c| g.get(r, c) != 0.0);
            assert_eq!(touched, r == 3 || r == 9, "row {r}");
        }
    }
}
