//! Ablation grids: level knockouts, mediator knockouts, and the stage-one
//! loss-weight sweep.
//!
//! Every variant trains with the same seeds and evaluates greedy
//! generations on the test split with all four metric families. Variants
//! that share a first-stage recipe share the trained first-stage
//! parameters, so mediator knockouts differ from the full model only in
//! the second stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use strata_data::corpus::LoadedSample;
use strata_model::{DecodeConfig, Model, StageTwoParts};
use strata_tensor::ParamStore;

use crate::config::RunConfig;
use crate::evalio::{eval_pairs, HypLine, Metric};
use crate::genreport::generate_split;
use crate::train::{train_stage1, train_stage2};
use crate::{cfg_err, Result};

pub const CSV_METRICS: [&str; 7] = [
    "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor", "cider",
];

/// Stage-one loss weights swept by the lambda grid. The third entry is
/// the training default.
pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Level and mediator knockouts together.
    Full,
    /// Pretraining-level knockouts only.
    Levels,
    /// Mediator knockouts only.
    Mediators,
    /// Stage-one loss-weight sweep, evaluated without mediators.
    Lambda,
}

impl GridKind {
    pub fn parse(s: &str) -> Result<GridKind> {
        match s {
            "full" => Ok(GridKind::Full),
            "levels" => Ok(GridKind::Levels),
            "mediators" => Ok(GridKind::Mediators),
            "lambda" => Ok(GridKind::Lambda),
            other => Err(cfg_err(format!(
                "unknown grid {other:?} (expected full, levels, mediators, or lambda)"
            ))),
        }
    }
}

/// First-stage recipe of a variant. `lambda` of None keeps the configured
/// weight; a knockout pins it so the surviving term gets weight one.
#[derive(Debug, Clone, Copy, PartialEq)]
struct S1Recipe {
    use_low: bool,
    use_mid: bool,
    lambda: Option<f64>,
}

const S1_FULL: S1Recipe = S1Recipe {
    use_low: true,
    use_mid: true,
    lambda: None,
};

#[derive(Debug, Clone, Copy)]
struct Variant {
    name: &'static str,
    /// None skips pretraining entirely.
    stage1: Option<S1Recipe>,
    /// None evaluates the first-stage model directly, without mediators.
    stage2: Option<StageTwoParts>,
}

const BOTH: StageTwoParts = StageTwoParts {
    use_vdm: true,
    use_ldm: true,
};

/// Row order is fixed so reruns produce identical files. The full model
/// doubles as the both-mediators row.
fn variants(kind: GridKind) -> Vec<Variant> {
    let full = Variant {
        name: "full",
        stage1: Some(S1_FULL),
        stage2: Some(BOTH),
    };
    let levels = [
        Variant {
            name: "low-mid",
            stage1: Some(S1_FULL),
            stage2: None,
        },
        Variant {
            name: "low-high",
            stage1: Some(S1Recipe {
                use_low: true,
                use_mid: false,
                lambda: Some(1.0),
            }),
            stage2: Some(BOTH),
        },
        Variant {
            name: "mid-high",
            stage1: Some(S1Recipe {
                use_low: false,
                use_mid: true,
                lambda: Some(0.0),
            }),
            stage2: Some(BOTH),
        },
        Variant {
            name: "high-only",
            stage1: None,
            stage2: Some(BOTH),
        },
    ];
    let mediators = [
        Variant {
            name: "vdm-only",
            stage1: Some(S1_FULL),
            stage2: Some(StageTwoParts {
                use_vdm: true,
                use_ldm: false,
            }),
        },
        Variant {
            name: "ldm-only",
            stage1: Some(S1_FULL),
            stage2: Some(StageTwoParts {
                use_vdm: false,
                use_ldm: true,
            }),
        },
    ];
    let mut out = vec![full];
    if kind == GridKind::Full || kind == GridKind::Levels {
        out.extend(levels);
    }
    if kind == GridKind::Full || kind == GridKind::Mediators {
        out.extend(mediators);
    }
    out
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// Stage-one loss weight in effect; None when stage one never ran.
    pub lambda: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
}

fn row_metrics(
    model: &Model,
    params: &ParamStore<f32>,
    test: &[LoadedSample],
) -> Result<BTreeMap<String, f64>> {
    let hyps = generate_split(model, params, test, &DecodeConfig::greedy())?;
    let refs: Vec<HypLine> = test
        .iter()
        .map(|s| HypLine {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
        })
        .collect();
    let report = eval_pairs(
        &hyps,
        &refs,
        &[Metric::Bleu, Metric::Rouge, Metric::Meteor, Metric::Cider],
    )?;
    Ok(report.metrics)
}

/// Trained first-stage parameters per recipe, within one seed.
type S1Cache = BTreeMap<(bool, bool, u64), ParamStore<f32>>;

fn stage1_for(
    cfg: &RunConfig,
    recipe: S1Recipe,
    cache: &mut S1Cache,
    train: &[LoadedSample],
    val: &[LoadedSample],
) -> Result<ParamStore<f32>> {
    let lambda = recipe.lambda.unwrap_or(cfg.stage1.lambda);
    let key = (recipe.use_low, recipe.use_mid, lambda.to_bits());
    if let Some(hit) = cache.get(&key) {
        return Ok(hit.clone());
    }
    let mut c = cfg.clone();
    c.stage1.use_low = recipe.use_low;
    c.stage1.use_mid = recipe.use_mid;
    c.stage1.lambda = lambda;
    let trained = train_stage1(&c, train, val)?;
    cache.insert(key, trained.params.clone());
    Ok(trained.params)
}

/// Runs one grid over the given seeds. Rows come out seed-major in the
/// fixed variant order.
pub fn run_grid(
    cfg: &RunConfig,
    kind: GridKind,
    seeds: &[u64],
    train: &[LoadedSample],
    val: &[LoadedSample],
    test: &[LoadedSample],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(cfg_err("ablation needs at least one seed"));
    }
    if kind == GridKind::Lambda {
        return run_lambda_grid(cfg, seeds, train, val, test);
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let mut cache = S1Cache::new();
        for v in variants(kind) {
            log::info!("ablation: variant {} seed {seed}", v.name);
            let s1 = match v.stage1 {
                Some(r) => Some(stage1_for(&c, r, &mut cache, train, val)?),
                None => None,
            };
            let lambda = v
                .stage1
                .map(|r| r.lambda.unwrap_or(cfg.stage1.lambda));
            let (model, params) = match v.stage2 {
                Some(parts) => {
                    let mut c2 = c.clone();
                    c2.stage2.use_vdm = parts.use_vdm;
                    c2.stage2.use_ldm = parts.use_ldm;
                    let trained = train_stage2(&c2, train, val, s1.as_ref())?;
                    (Model::stage2(c.model.clone(), parts)?, trained.params)
                }
                None => {
                    let params = s1.ok_or_else(|| {
                        cfg_err(format!("variant {} has neither stage", v.name))
                    })?;
                    (Model::stage1(c.model.clone())?, params)
                }
            };
            rows.push(AblationRow {
                variant: v.name.to_string(),
                seed,
                lambda,
                metrics: row_metrics(&model, &params, test)?,
            });
        }
    }
    Ok(rows)
}

/// Loss-weight sweep: both first-stage terms active, no second stage, so
/// the sweep isolates the weighting itself.
fn run_lambda_grid(
    cfg: &RunConfig,
    seeds: &[u64],
    train: &[LoadedSample],
    val: &[LoadedSample],
    test: &[LoadedSample],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        for lambda in LAMBDA_SWEEP {
            log::info!("ablation: lambda {lambda} seed {seed}");
            let mut cl = c.clone();
            cl.stage1.use_low = true;
            cl.stage1.use_mid = true;
            cl.stage1.lambda = lambda;
            let trained = train_stage1(&cl, train, val)?;
            let model = Model::stage1(c.model.clone())?;
            rows.push(AblationRow {
                variant: format!("lambda-{lambda}"),
                seed,
                lambda: Some(lambda),
                metrics: row_metrics(&model, &trained.params, test)?,
            });
        }
    }
    Ok(rows)
}

/// Mean of one metric across every row of a variant; None if the variant
/// never ran.
pub fn mean_metric(rows: &[AblationRow], variant: &str, metric: &str) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| r.metrics.get(metric).copied())
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn grid_csv(rows: &[AblationRow]) -> Result<String> {
    let mut text = String::from("variant,seed,lambda");
    for m in CSV_METRICS {
        text.push(',');
        text.push_str(m);
    }
    text.push('\n');
    for r in rows {
        write!(text, "{},{}", r.variant, r.seed).expect("string write");
        match r.lambda {
            Some(l) => write!(text, ",{l}").expect("string write"),
            None => text.push(','),
        }
        for m in CSV_METRICS {
            let v = r
                .metrics
                .get(m)
                .copied()
                .ok_or_else(|| cfg_err(format!("row {} lacks metric {m}", r.variant)))?;
            write!(text, ",{v:.6}").expect("string write");
        }
        text.push('\n');
    }
    Ok(text)
}

pub fn write_grid_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let text = grid_csv(rows)?;
    fs::write(path, text)
        .map_err(|e| cfg_err(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use strata_data::{generate_corpus, CorpusReader, DataConfig, Split};
    use strata_model::ModelConfig;

    #[test]
    fn grid_rows_are_fixed_and_ordered() {
        let names = |k| {
            variants(k)
                .iter()
                .map(|v| v.name)
                .collect::<Vec<_>>()
        };
        assert_eq!(
            names(GridKind::Full),
            ["full", "low-mid", "low-high", "mid-high", "high-only", "vdm-only", "ldm-only"]
        );
        assert_eq!(
            names(GridKind::Levels),
            ["full", "low-mid", "low-high", "mid-high", "high-only"]
        );
        assert_eq!(names(GridKind::Mediators), ["full", "vdm-only", "ldm-only"]);
        // Mediator knockouts reuse the full first stage.
        for v in variants(GridKind::Mediators) {
            assert_eq!(v.stage1, Some(S1_FULL));
        }
    }

    #[test]
    fn grid_names_parse() {
        assert_eq!(GridKind::parse("levels").unwrap(), GridKind::Levels);
        assert_eq!(GridKind::parse("lambda").unwrap(), GridKind::Lambda);
        assert_eq!(GridKind::parse("both").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn csv_shape_is_stable() {
        let mut metrics = BTreeMap::new();
        for m in CSV_METRICS {
            metrics.insert(m.to_string(), 0.5);
        }
        let rows = vec![
            AblationRow {
                variant: "full".into(),
                seed: 42,
                lambda: Some(0.25),
                metrics: metrics.clone(),
            },
            AblationRow {
                variant: "high-only".into(),
                seed: 42,
                lambda: None,
                metrics,
            },
        ];
        let csv = grid_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "variant,seed,lambda,bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,meteor,cider"
        );
        assert!(lines[1].starts_with("full,42,0.25,0.500000"));
        assert!(lines[2].starts_with("high-only,42,,0.500000"));
        assert_eq!(mean_metric(&rows, "full", "bleu_4"), Some(0.5));
        assert_eq!(mean_metric(&rows, "absent", "bleu_4"), None);
    }

    fn micro_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_mult: 2,
            patch: 4,
            image_h: 16,
            image_w: 16,
            channels: 1,
            vocab: 32,
            n_max: 16,
            num_entities: 3,
            num_positions: 4,
            eclo_negatives: 2,
            mim_rate: 0.5,
            vdm_k: 2,
            ..ModelConfig::desk()
        };
        cfg.data = DataConfig {
            image_h: 16,
            image_w: 16,
            channels: 1,
            pos_grid_h: 2,
            pos_grid_w: 2,
            num_entities: 3,
            num_positions: 4,
            vocab_size: 32,
            n_max: 16,
            max_entities: 2,
            noise: 0.1,
            train: 6,
            val: 2,
            test: 2,
            confound_fraction: 0.0,
            ..DataConfig::default()
        };
        cfg.train.batch = 4;
        cfg.stage1.epochs = 1;
        cfg.stage2.epochs = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn levels_grid_runs_end_to_end_on_a_micro_corpus() {
        let cfg = micro_run_config();
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&cfg.data, 7, "micro", dir.path()).unwrap();
        let reader = CorpusReader::open(dir.path()).unwrap();
        let train = reader.load_split(Split::Train).unwrap();
        let val = reader.load_split(Split::Val).unwrap();
        let test = reader.load_split(Split::Test).unwrap();

        let rows = run_grid(&cfg, GridKind::Levels, &[11], &train, &val, &test).unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            for m in CSV_METRICS {
                let v = r.metrics[m];
                assert!(v.is_finite() && v >= 0.0, "{}/{m} = {v}", r.variant);
            }
        }
        // The shared first stage is trained once: full and low-mid rows
        // must agree on it, which shows through identical lambda fields.
        assert_eq!(rows[0].lambda, Some(0.25));
        assert_eq!(rows[1].lambda, Some(0.25));
        assert_eq!(rows[4].lambda, None);
        grid_csv(&rows).unwrap();
    }
}
