//! Prefix language modeling over the shared trunk.
//!
//! A report of n tokens is split at a prefix length drawn uniformly from
//! [1, n-1]. Prefix positions attend bidirectionally among themselves,
//! suffix positions attend causally, and the loss is the summed
//! cross-entropy of the suffix tokens. Visual context enters through the
//! trunk's cross-attention and is occasionally dropped so the decoder
//! keeps a usable text-only mode.

use crate::decoder::DecoderTrunk;
use crate::encoder::TextEmbedder;
use crate::{ModelError, Result};
use rand::Rng;
use strata_tensor::nn::prefix_lm_mask;
use strata_tensor::{Binder, Reduction, Scalar, Var};

/// Uniform prefix length in `[1, n-1]`.
pub fn draw_prefix_len<R: Rng>(n: usize, rng: &mut R) -> Result<usize> {
    if n < 2 {
        return Err(ModelError::Input(format!(
            "sequence of {n} tokens cannot be split into prefix and suffix"
        )));
    }
    Ok(rng.random_range(1..n))
}

fn check_split(n: usize, n_p: usize) -> Result<()> {
    if n < 2 {
        return Err(ModelError::Input(format!("{n} tokens leave nothing to predict")));
    }
    if n_p == 0 || n_p >= n {
        return Err(ModelError::Input(format!(
            "prefix length {n_p} outside [1, {}]",
            n - 1
        )));
    }
    Ok(())
}

/// Logits over all `n-1` input positions; row `i` predicts token `i+1`.
pub fn plm_logits<'t, T: Scalar>(
    trunk: &DecoderTrunk,
    emb: &TextEmbedder,
    bd: &Binder<'_, 't, T>,
    f_v: Option<Var<'t, T>>,
    tokens: &[u32],
    n_p: usize,
) -> Result<Var<'t, T>> {
    let n = tokens.len();
    check_split(n, n_p)?;
    let x = emb.embed(bd, &tokens[..n - 1])?;
    let mask = prefix_lm_mask::<T>(n - 1, n_p);
    let h = trunk.forward(bd, x, Some(&mask), f_v, None, None)?;
    trunk.vocab_logits(bd, h)
}

/// Summed cross-entropy of the suffix `tokens[n_p..]`.
pub fn plm_loss<'t, T: Scalar>(
    trunk: &DecoderTrunk,
    emb: &TextEmbedder,
    bd: &Binder<'_, 't, T>,
    f_v: Option<Var<'t, T>>,
    tokens: &[u32],
    n_p: usize,
) -> Result<Var<'t, T>> {
    let n = tokens.len();
    let logits = plm_logits(trunk, emb, bd, f_v, tokens, n_p)?;
    let suffix = logits.narrow_rows(n_p - 1, n - n_p)?;
    let targets: Vec<usize> = tokens[n_p..].iter().map(|&t| t as usize).collect();
    Ok(suffix.cross_entropy(&targets, Reduction::Sum)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::encoder::VisualEncoder;
    use strata_tensor::rng::stream;
    use strata_tensor::{ParamStore, Tape, Tensor};

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.d = 16;
        c.heads = 2;
        c.image_h = 8;
        c.image_w = 8;
        c.n_max = 12;
        c.vdm_k = 1;
        c.validate().unwrap();
        c
    }

    fn parts(c: &ModelConfig, seed: u64) -> (DecoderTrunk, TextEmbedder, ParamStore<f64>) {
        let trunk = DecoderTrunk::new(c, false);
        let emb = TextEmbedder::new(c);
        let mut ps = ParamStore::new(seed);
        trunk.declare(&mut ps).unwrap();
        emb.declare(&mut ps).unwrap();
        (trunk, emb, ps)
    }

    #[test]
    fn prefix_draws_cover_the_legal_range() {
        let mut rng = stream(3, "prefix");
        let n = 7;
        let mut seen = [false; 7];
        for _ in 0..10_000 {
            let p = draw_prefix_len(n, &mut rng).unwrap();
            assert!((1..n).contains(&p));
            seen[p] = true;
        }
        assert!(seen[1..n].iter().all(|&s| s));
        assert!(draw_prefix_len(1, &mut rng).is_err());
    }

    #[test]
    fn split_bounds_are_enforced() {
        let c = cfg();
        let (trunk, emb, ps) = parts(&c, 5);
        let tape = Tape::new();
        let bd = strata_tensor::Binder::new(&tape, &ps);
        let tokens = [0u32, 5, 6, 1];
        assert!(plm_loss(&trunk, &emb, &bd, None, &tokens, 0).is_err());
        assert!(plm_loss(&trunk, &emb, &bd, None, &tokens, 4).is_err());
        assert!(plm_loss(&trunk, &emb, &bd, None, &tokens[..1], 1).is_err());
        assert!(plm_loss(&trunk, &emb, &bd, None, &tokens, 3).is_ok());
    }

    #[test]
    fn uniform_logits_cost_suffix_len_times_ln_vocab() {
        let c = cfg();
        let (trunk, emb, mut ps) = parts(&c, 9);
        ps.set("dec.vocab.w", Tensor::zeros(c.d, c.vocab));
        ps.set("dec.vocab.b", Tensor::zeros(1, c.vocab));
        let tape = Tape::new();
        let bd = strata_tensor::Binder::new(&tape, &ps);
        let tokens = [0u32, 4, 9, 12, 7, 7, 3, 1]; // n = 8
        let n_p = 3;
        let loss = plm_loss(&trunk, &emb, &bd, None, &tokens, n_p)
            .unwrap()
            .item()
            .unwrap();
        let want = (tokens.len() - n_p) as f64 * (c.vocab as f64).ln();
        assert!((loss - want).abs() < 1e-9, "loss={loss}, want={want}");
    }

    #[test]
    fn suffix_logits_ignore_later_tokens() {
        let c = cfg();
        let (trunk, emb, mut ps) = parts(&c, 17);
        let enc = VisualEncoder::new(&c);
        enc.declare(&mut ps).unwrap();
        let pixels: Vec<f32> = (0..64).map(|i| (i % 9) as f32 / 9.0).collect();

        let run = |tokens: &[u32]| {
            let tape = Tape::new();
            let bd = strata_tensor::Binder::new(&tape, &ps);
            let f_v = enc.encode(&bd, &pixels, &c, None).unwrap();
            let logits = plm_logits(&trunk, &emb, &bd, Some(f_v), tokens, 2).unwrap();
            logits.value()
        };
        let base = run(&[0, 5, 6, 7, 8, 1]);
        let bumped = run(&[0, 5, 6, 7, 9, 1]); // position 4 changed
        // rows 0..3 predict positions 1..4 and cannot see position 4
        for r in 0..4 {
            for col in 0..c.vocab {
                assert_eq!(base.get(r, col), bumped.get(r, col), "row {r}");
            }
        }
        // a changed prefix token is visible everywhere
        let prefix_bumped = run(&[0, 4, 6, 7, 8, 1]);
        assert_ne!(base.get(3, 0), prefix_bumped.get(3, 0));
    }

    #[test]
    fn visual_context_reaches_the_logits() {
        let c = cfg();
        let (trunk, emb, mut ps) = parts(&c, 23);
        let enc = VisualEncoder::new(&c);
        enc.declare(&mut ps).unwrap();
        let tokens = [0u32, 5, 6, 7, 1];

        let with_vision = |scale: f32| {
            let tape = Tape::new();
            let bd = strata_tensor::Binder::new(&tape, &ps);
            let pixels: Vec<f32> = (0..64).map(|i| scale * (i % 4) as f32 / 4.0).collect();
            let f_v = enc.encode(&bd, &pixels, &c, None).unwrap();
            plm_loss(&trunk, &emb, &bd, Some(f_v), &tokens, 2)
                .unwrap()
                .item()
                .unwrap()
        };
        let no_vision = {
            let tape = Tape::new();
            let bd = strata_tensor::Binder::new(&tape, &ps);
            plm_loss(&trunk, &emb, &bd, None, &tokens, 2)
                .unwrap()
                .item()
                .unwrap()
        };
        assert_ne!(with_vision(1.0), with_vision(0.3));
        assert_ne!(with_vision(1.0), no_vision);
    }
}
