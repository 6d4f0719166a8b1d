use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use strata_cli::{
    check_model_fits_data, config_hash, corpus_hash, eval_files, json_hash, load_checkpoint,
    parse_decode, parse_metric_list, save_checkpoint, write_dir_manifest, write_file_manifest,
    write_grid_csv, write_loss_log, write_token_lines, CliError, GridKind, Result, RunConfig,
    RunManifest, TrainedStage, STAGE_ONE, STAGE_TWO,
};
use strata_data::{CorpusReader, LoadedSample, Split};
use strata_model::{Model, StageTwoParts};
use strata_scm::{run_backdoor_trials, run_frontdoor_trials, VerifySummary};

#[derive(Parser)]
#[command(name = "strata", version, about = "Synthetic multimodal report harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus into a directory.
    #[command(name = "gen-data")]
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Corpus seed; equal (config, seed) reproduce the bytes.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write a checkpoint plus the loss curve.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to transfer from; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Decode reports for one split from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// greedy, beam, or beam:WIDTH.
        #[arg(long, default_value = "greedy")]
        decode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypothesis token lines against references.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Comma-separated list out of bleu, rouge, meteor, cider.
        #[arg(long, default_value = "bleu,rouge,meteor,cider")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score an ablation grid, one CSV row per (variant, seed).
    Ablate {
        /// full, levels, mediators, or lambda.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "42,43,44")]
        seeds: String,
    },
    /// Check the causal-adjustment estimators against exact graph surgery.
    #[command(name = "scm-verify")]
    ScmVerify {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Optional path for the JSON summary; stdout always gets it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("strata: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, seed, out } => gen_data(&config, seed, &out),
        Cmd::Train {
            stage,
            config,
            data,
            out,
            init,
        } => train(stage, &config, &data, &out, init.as_deref()),
        Cmd::Generate {
            ckpt,
            data,
            split,
            decode,
            out,
        } => generate(&ckpt, &data, &split, &decode, &out),
        Cmd::Eval {
            hyp,
            reference,
            metrics,
            out,
        } => eval(&hyp, &reference, &metrics, &out),
        Cmd::Ablate {
            grid,
            config,
            data,
            out,
            seeds,
        } => ablate(&grid, &config, &data, &out, &seeds),
        Cmd::ScmVerify { trials, seed, out } => scm_verify(trials, seed, out.as_deref()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| strata_cli::cfg_err(format!("cannot create {}: {e}", dir.display())))
}

fn ensure_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(strata_cli::cfg_err(format!(
            "unknown split {other:?} (expected train, val, or test)"
        ))),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<u64>()
                .map_err(|_| strata_cli::cfg_err(format!("bad seed {part:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(strata_cli::cfg_err("no seeds given"));
    }
    Ok(out)
}

/// A corpus is usable only under the exact data section that generated it.
fn open_matching_corpus(cfg: &RunConfig, dir: &Path) -> Result<CorpusReader> {
    let reader = CorpusReader::open(dir)?;
    if reader.meta.config != cfg.data {
        return Err(strata_cli::cfg_err(format!(
            "corpus {} was generated under a different data section; regenerate it or fix the config",
            dir.display()
        )));
    }
    Ok(reader)
}

fn load_three_splits(
    reader: &CorpusReader,
) -> Result<(Vec<LoadedSample>, Vec<LoadedSample>, Vec<LoadedSample>)> {
    Ok((
        reader.load_split(Split::Train)?,
        reader.load_split(Split::Val)?,
        reader.load_split(Split::Test)?,
    ))
}

fn gen_data(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    ensure_dir(out)?;
    let built = strata_data::generate_corpus(&cfg.data, seed, &json_hash(&cfg.data), out)?;
    let c = &built.meta.counts;
    let mut m = RunManifest::new("gen-data");
    m.seed = Some(seed);
    m.config_hash = Some(config_hash(&cfg));
    m.corpus_hash = Some(corpus_hash(out)?);
    m.config = Some(cfg);
    write_dir_manifest(out, &m)?;
    println!(
        "corpus at {}: {} train, {} val, {} test",
        out.display(),
        c.train,
        c.val,
        c.test
    );
    Ok(())
}

fn train(stage: u8, config: &Path, data: &Path, out: &Path, init: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let hash = config_hash(&cfg);
    let reader = open_matching_corpus(&cfg, data)?;
    let (train, val, _) = load_three_splits(&reader)?;
    ensure_dir(out)?;

    let (trained, ckpt_path): (TrainedStage, PathBuf) = match stage {
        STAGE_ONE => {
            if init.is_some() {
                return Err(strata_cli::cfg_err(
                    "stage 1 trains from scratch; --init only applies to stage 2",
                ));
            }
            let trained = strata_cli::train_stage1(&cfg, &train, &val)?;
            let path = out.join("stage1.htsc");
            save_checkpoint(
                &path,
                STAGE_ONE,
                &hash,
                &cfg.model,
                false,
                false,
                &trained.params,
            )?;
            (trained, path)
        }
        STAGE_TWO => {
            let init_path = init.ok_or_else(|| {
                strata_cli::cfg_err("stage 2 needs --init pointing at a stage-1 checkpoint")
            })?;
            let ckpt = load_checkpoint(init_path)?;
            if ckpt.stage != STAGE_ONE {
                return Err(strata_cli::cfg_err(format!(
                    "--init {} holds a stage-{} checkpoint; stage 2 initializes from stage 1",
                    init_path.display(),
                    ckpt.stage
                )));
            }
            if ckpt.config_hash != hash {
                return Err(strata_cli::cfg_err(format!(
                    "--init {} was trained under config hash {}, this run resolves to {}; refusing the mismatch",
                    init_path.display(),
                    ckpt.config_hash,
                    hash
                )));
            }
            let trained = strata_cli::train_stage2(&cfg, &train, &val, Some(&ckpt.params))?;
            let path = out.join("stage2.htsc");
            save_checkpoint(
                &path,
                STAGE_TWO,
                &hash,
                &cfg.model,
                cfg.stage2.use_vdm,
                cfg.stage2.use_ldm,
                &trained.params,
            )?;
            (trained, path)
        }
        _ => unreachable!("clap bounds the stage"),
    };

    write_loss_log(&out.join("loss_log.jsonl"), &trained.log)?;
    let mut m = RunManifest::new("train");
    m.seed = Some(cfg.train.seed);
    m.config_hash = Some(hash);
    m.corpus_hash = Some(corpus_hash(data)?);
    m.init = init.map(|p| p.display().to_string());
    m.config = Some(cfg);
    m.args.insert("stage".into(), stage.to_string());
    write_dir_manifest(out, &m)?;

    let best = &trained.log[trained.best_epoch];
    println!(
        "stage {stage}: {} epochs, best epoch {} (val {:.5}) -> {}",
        trained.log.len(),
        best.epoch,
        best.val_loss,
        ckpt_path.display()
    );
    Ok(())
}

fn generate(ckpt: &Path, data: &Path, split: &str, decode: &str, out: &Path) -> Result<()> {
    let loaded = load_checkpoint(ckpt)?;
    let reader = CorpusReader::open(data)?;
    check_model_fits_data(&loaded.model, &reader.meta.config)?;
    let split = parse_split(split)?;
    let decode_cfg = parse_decode(decode)?;
    let samples = reader.load_split(split)?;
    if samples.is_empty() {
        return Err(strata_cli::cfg_err(format!(
            "split {} of {} is empty",
            split.as_str(),
            data.display()
        )));
    }
    let model = match loaded.stage {
        STAGE_ONE => Model::stage1(loaded.model.clone())?,
        _ => Model::stage2(
            loaded.model.clone(),
            StageTwoParts {
                use_vdm: loaded.use_vdm,
                use_ldm: loaded.use_ldm,
            },
        )?,
    };
    let hyps = strata_cli::generate_split(&model, &loaded.params, &samples, &decode_cfg)?;
    ensure_parent(out)?;
    write_token_lines(out, &hyps)?;

    let mut m = RunManifest::new("generate");
    m.config_hash = Some(loaded.config_hash.clone());
    m.corpus_hash = Some(corpus_hash(data)?);
    m.init = Some(ckpt.display().to_string());
    m.args.insert("split".into(), split.as_str().to_string());
    m.args.insert("decode".into(), decode.to_string());
    write_file_manifest(out, &m)?;
    println!("{} reports -> {}", hyps.len(), out.display());
    Ok(())
}

fn eval(hyp: &Path, reference: &Path, metrics: &str, out: &Path) -> Result<()> {
    let wanted = parse_metric_list(metrics)?;
    let report = eval_files(hyp, reference, &wanted)?;
    ensure_parent(out)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out, text)?;

    let mut m = RunManifest::new("eval");
    m.args.insert("hyp".into(), hyp.display().to_string());
    m.args.insert("ref".into(), reference.display().to_string());
    m.args.insert("metrics".into(), metrics.to_string());
    write_file_manifest(out, &m)?;
    for (name, value) in &report.metrics {
        println!("{name} {value:.6}");
    }
    Ok(())
}

fn ablate(grid: &str, config: &Path, data: &Path, out: &Path, seeds: &str) -> Result<()> {
    let kind = GridKind::parse(grid)?;
    let seed_list = parse_seeds(seeds)?;
    let cfg = RunConfig::load(config)?;
    let reader = open_matching_corpus(&cfg, data)?;
    let (train, val, test) = load_three_splits(&reader)?;
    ensure_dir(out)?;

    let rows = strata_cli::run_grid(&cfg, kind, &seed_list, &train, &val, &test)?;
    write_grid_csv(&out.join("ablation.csv"), &rows)?;

    let mut m = RunManifest::new("ablate");
    m.config_hash = Some(config_hash(&cfg));
    m.corpus_hash = Some(corpus_hash(data)?);
    m.config = Some(cfg);
    m.args.insert("grid".into(), grid.to_string());
    m.args.insert("seeds".into(), seeds.to_string());
    write_dir_manifest(out, &m)?;

    let mut seen: Vec<&str> = Vec::new();
    for r in &rows {
        if !seen.contains(&r.variant.as_str()) {
            seen.push(&r.variant);
        }
    }
    for variant in seen {
        if let Some(mean) = strata_cli::mean_metric(&rows, variant, "bleu_4") {
            println!("{variant}: mean bleu_4 {mean:.4} over {} seed(s)", seed_list.len());
        }
    }
    println!("{} rows -> {}", rows.len(), out.join("ablation.csv").display());
    Ok(())
}

fn scm_verify(trials: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if trials == 0 {
        return Err(strata_cli::cfg_err("--trials must be positive"));
    }
    let front = run_frontdoor_trials(trials, seed)?;
    let back = run_backdoor_trials(trials, seed)?;
    let summary = VerifySummary {
        trials,
        max_abs_error: front.max_abs_error.max(back.max_abs_error),
        failures: front.failures + back.failures,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    print!("{text}");
    if let Some(path) = out {
        ensure_parent(path)?;
        fs::write(path, &text)?;
        let mut m = RunManifest::new("scm-verify");
        m.seed = Some(seed);
        m.args = BTreeMap::from([("trials".to_string(), trials.to_string())]);
        write_file_manifest(path, &m)?;
    }
    if summary.failures > 0 {
        return Err(CliError::Numeric(format!(
            "{} of {} adjustment trials exceeded tolerance",
            summary.failures,
            2 * trials
        )));
    }
    Ok(())
}
