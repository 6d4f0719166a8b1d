//! Report generation over a corpus split.

use strata_data::corpus::LoadedSample;
use strata_data::{BOS, EOS};
use strata_model::{decode_report, DecodeConfig, Model};
use strata_tensor::ParamStore;

use crate::evalio::HypLine;
use crate::{cfg_err, Result};

/// Decode flag syntax: "greedy", "beam" (width 3), or "beam:K".
pub fn parse_decode(s: &str) -> Result<DecodeConfig> {
    let cfg = match s {
        "greedy" => DecodeConfig::greedy(),
        "beam" => DecodeConfig::beam(3),
        other => match other.strip_prefix("beam:") {
            Some(width) => {
                let w: usize = width
                    .parse()
                    .map_err(|_| cfg_err(format!("bad beam width {width:?}")))?;
                DecodeConfig::beam(w)
            }
            None => return Err(cfg_err(format!("unknown decode mode {s:?}"))),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Decodes every sample in order. Output ids preserve the split's order,
/// so equal inputs produce byte-identical hypothesis files.
pub fn generate_split(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
    decode: &DecodeConfig,
) -> Result<Vec<HypLine>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let tokens = decode_report(model, store, &s.image, BOS, EOS, decode)?;
        out.push(HypLine {
            id: s.id.clone(),
            tokens,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use strata_model::DecodeMode;

    #[test]
    fn decode_flags_parse() {
        assert_eq!(parse_decode("greedy").unwrap().mode, DecodeMode::Greedy);
        let b = parse_decode("beam").unwrap();
        assert_eq!(b.mode, DecodeMode::Beam);
        assert_eq!(b.beam_size, 3);
        assert_eq!(parse_decode("beam:5").unwrap().beam_size, 5);
        assert!(parse_decode("beam:0").is_err());
        assert!(parse_decode("beam:x").is_err());
        assert!(parse_decode("sample").is_err());
    }
}
