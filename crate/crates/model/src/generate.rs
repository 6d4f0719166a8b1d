//! Report decoding: greedy and beam search.
//!
//! Both strategies are deterministic. Ties in the next-token choice go to
//! the lowest token id, and beams with one hypothesis reproduce greedy
//! decoding exactly (scores are total log-probabilities, never
//! length-normalized).

use crate::config::DecodeMode;
use crate::model::Model;
use crate::{ModelError, Result};
use strata_tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig { mode: DecodeMode::Greedy, beam_size: 1 }
    }

    pub fn beam(beam_size: usize) -> Self {
        DecodeConfig { mode: DecodeMode::Beam, beam_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Beam && self.beam_size == 0 {
            return Err(ModelError::Config("beam size must be at least 1".into()));
        }
        Ok(())
    }
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    logp: f64,
    finished: bool,
}

/// Decodes one report, starting at `bos` and stopping at `eos` or the
/// model's length limit. The result includes both markers (the end marker
/// only if it was produced).
pub fn decode_report<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    pixels: &[f32],
    bos: u32,
    eos: u32,
    decode: &DecodeConfig,
) -> Result<Vec<u32>> {
    decode.validate()?;
    match decode.mode {
        DecodeMode::Greedy => greedy(model, store, pixels, bos, eos),
        DecodeMode::Beam => beam(model, store, pixels, bos, eos, decode.beam_size),
    }
}

fn greedy<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    pixels: &[f32],
    bos: u32,
    eos: u32,
) -> Result<Vec<u32>> {
    let mut tokens = vec![bos];
    while tokens.len() < model.cfg.n_max {
        let logits = model.step_logits(store, pixels, &tokens)?;
        let next = argmax_lowest(&logits) as u32;
        tokens.push(next);
        if next == eos {
            break;
        }
    }
    Ok(tokens)
}

fn beam<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    pixels: &[f32],
    bos: u32,
    eos: u32,
    width: usize,
) -> Result<Vec<u32>> {
    let n_max = model.cfg.n_max;
    let mut beams = vec![Beam { tokens: vec![bos], logp: 0.0, finished: false }];
    loop {
        let expandable: Vec<usize> = beams
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.finished && b.tokens.len() < n_max)
            .map(|(i, _)| i)
            .collect();
        if expandable.is_empty() {
            break;
        }
        let mut cands: Vec<Beam> = beams
            .iter()
            .filter(|b| b.finished || b.tokens.len() >= n_max)
            .cloned()
            .collect();
        for i in expandable {
            let b = &beams[i];
            let lp = log_softmax(&model.step_logits(store, pixels, &b.tokens)?);
            for (t, &l) in lp.iter().enumerate() {
                let mut tokens = b.tokens.clone();
                tokens.push(t as u32);
                cands.push(Beam {
                    tokens,
                    logp: b.logp + l,
                    finished: t as u32 == eos,
                });
            }
        }
        cands.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.tokens.cmp(&b.tokens)));
        cands.truncate(width);
        beams = cands;
    }
    beams.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(beams.remove(0).tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::config::ModelConfig;
    use strata_tensor::rng::stream;
    use strata_tensor::Tensor;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.d = 16;
        c.heads = 2;
        c.image_h = 16;
        c.image_w = 16;
        c.vocab = 24;
        c.n_max = 10;
        c.num_entities = 4;
        c.num_positions = 8;
        c.eclo_negatives = 3;
        c.vdm_k = 2;
        c.validate_stage2().unwrap();
        c
    }

    fn pixels(seed: u64, c: &ModelConfig) -> Vec<f32> {
        let mut rng = stream(seed, "gen-pix");
        (0..c.image_h * c.image_w).map(|_| rng.random_range(0.0f32..1.0)).collect()
    }

    #[test]
    fn greedy_decoding_is_deterministic_and_well_formed() {
        let c = cfg();
        let m = Model::stage1(c.clone()).unwrap();
        let ps = m.new_store::<f32>(3).unwrap();
        let img = pixels(1, &c);
        let a = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::greedy()).unwrap();
        let b = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::greedy()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], 0);
        assert!(a.len() <= c.n_max);
        // the end marker, if present, is final and unique
        let eos_positions: Vec<usize> =
            a.iter().enumerate().filter(|(_, &t)| t == 1).map(|(i, _)| i).collect();
        assert!(eos_positions.len() <= 1);
        if let Some(&p) = eos_positions.first() {
            assert_eq!(p, a.len() - 1);
        }
    }

    #[test]
    fn single_beam_reproduces_greedy_exactly() {
        let c = cfg();
        for seed in [5u64, 17, 29] {
            let m = Model::stage1(c.clone()).unwrap();
            let ps = m.new_store::<f32>(seed).unwrap();
            let img = pixels(seed + 100, &c);
            let g = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::greedy()).unwrap();
            let b = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::beam(1)).unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn wider_beams_are_deterministic_and_never_worse_in_logprob() {
        let c = cfg();
        let m = Model::stage2(c.clone(), crate::model::StageTwoParts::both()).unwrap();
        let ps = m.new_store::<f32>(11).unwrap();
        let img = pixels(7, &c);
        let a = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::beam(3)).unwrap();
        let b = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::beam(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], 0);
        assert!(a.len() <= c.n_max);
    }

    #[test]
    fn a_head_biased_to_the_end_marker_stops_immediately() {
        let c = cfg();
        let m = Model::stage1(c.clone()).unwrap();
        let mut ps = m.new_store::<f32>(13).unwrap();
        ps.set("dec.vocab.w", Tensor::zeros(c.d, c.vocab));
        let mut b = Tensor::zeros(1, c.vocab);
        b.set(0, 1, 50.0);
        ps.set("dec.vocab.b", b);
        let img = pixels(9, &c);
        let g = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::greedy()).unwrap();
        assert_eq!(g, vec![0, 1]);
        let bm = decode_report(&m, &ps, &img, 0, 1, &DecodeConfig::beam(3)).unwrap();
        assert_eq!(bm, vec![0, 1]);
    }

    #[test]
    fn zero_width_beams_are_rejected() {
        assert!(DecodeConfig::beam(0).validate().is_err());
    }
}
