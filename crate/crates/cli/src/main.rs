use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use keyview::autodiff::UpdateOrder;
use keyview::gradcheck;
use keyview::harness::{self, evaluate, BaselineKind, EvalResult, OraclePredictor, Predictor, RandomPredictor};
use keyview::meta::{self, pretrain, AblationSpec, LogRecord, Pretrained, TrainState};
use keyview::model::{read_checkpoint, write_checkpoint};
use keyview::synth::{self, make_split, DatasetManifest, ManifestCategory, Split};
use keyview::RunConfig;

/// Default output root when neither `--out` nor the config sets one.
const OUT_ENV: &str = "KEYVIEW_OUT";
const CHECKPOINT_FILE: &str = "model.ckpt";
const EXIT_THRESHOLD: u8 = 2;

#[derive(Parser)]
#[command(name = "keyview", version, about = "Few-shot viewpoint estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Evaluation threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Drop the second-order term of the meta-gradient.
    #[arg(long)]
    first_order: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train, then meta-train; resumable.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) once this many iterations are done.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Checkpoint every N iterations.
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
        /// Ablation toggles, e.g. `--off lcon`.
        #[arg(long, value_parser = ["ms", "lcon", "kp"])]
        off: Vec<String>,
    },
    /// Adapt a trained model to one test category and report per-query errors.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        category: usize,
        #[arg(long, default_value_t = 0)]
        repetition: usize,
    },
    /// Score a trained model, a baseline, or a reference predictor.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "reference")]
        checkpoint: Option<PathBuf>,
        /// zero-shot, finetune-no-meta or fixed-8-keypoints (uses the checkpoint's bank).
        #[arg(long)]
        baseline: Option<String>,
        /// Ground-truth or uniform-random predictions; no checkpoint needed.
        #[arg(long, value_parser = ["oracle", "random"], conflicts_with = "baseline")]
        reference: Option<String>,
    },
    /// Meta-train and score all-on and each single-component-off configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Meta-train and score once per shot value.
    SweepShots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        shots: Vec<usize>,
    },
    /// Finite-difference and bilevel gradient checks.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        first_order: bool,
    },
}

impl Common {
    /// Defaults, then the file, then flags.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.eval.workers = w;
        }
        if self.first_order {
            cfg.meta.order = UpdateOrder::FirstOrder;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.display().to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| "runs".into())).join(format!("seed-{}", cfg.seed))
}

fn split(cfg: &RunConfig) -> Result<Split> {
    Ok(make_split(cfg.data.train_categories, cfg.data.test_categories, cfg.seed, &cfg.data)?)
}

fn load_state(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    let ckpt = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    TrainState::from_checkpoint(&ckpt, cfg).with_context(|| format!("checkpoint {}", path.display()))
}

/// The pre-trained parts stored alongside the meta-learned ones.
fn pretrained_of(state: &TrainState) -> Result<Pretrained> {
    let Some((bank, anchors)) = &state.bank else { bail!("checkpoint has no pre-trained bank") };
    Ok(Pretrained {
        feature_block: state.feature_block.clone(),
        bank: bank.clone(),
        anchors: anchors.clone(),
        losses: vec![],
    })
}

fn write_result(dir: &Path, r: &EvalResult) -> Result<()> {
    r.write_csv(&dir.join(format!("{}.csv", r.label)))?;
    r.write_summary(&dir.join(format!("{}.json", r.label)))?;
    println!(
        "{:<24} acc30 {:.4} ± {:.4}  mederr {:7.2}° ± {:.2}",
        r.label, r.acc30_mean, r.acc30_std, r.mederr_mean, r.mederr_std
    );
    Ok(())
}

fn gate(cfg: &RunConfig, results: &[EvalResult]) -> ExitCode {
    let Some(min) = cfg.eval.min_acc30 else { return ExitCode::SUCCESS };
    let failing: Vec<&EvalResult> = results.iter().filter(|r| r.acc30_mean < min).collect();
    for r in &failing {
        eprintln!("{}: acc30 {:.4} below threshold {min}", r.label, r.acc30_mean);
    }
    if failing.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_THRESHOLD)
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let s = split(cfg)?;
    let n = cfg.data.dump_samples;
    let mut categories = Vec::new();
    let mut samples = Vec::new();
    for (name, cats) in [("train", &s.train), ("test", &s.test)] {
        for c in cats.iter() {
            categories.push(ManifestCategory {
                id: c.id,
                seed: c.seed,
                split: name.into(),
                num_keypoints: c.num_keypoints(),
            });
            let root = keyview::rng::derive_seed(cfg.seed, "gen-data", &[c.id]);
            samples.extend(synth::query_pool(c, root, n, &cfg.data)?);
        }
    }
    let manifest = DatasetManifest {
        format_version: synth::FORMAT_VERSION,
        tool_version: meta::TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        categories,
        samples_per_category: n,
        records_file: synth::RECORDS_FILE.into(),
        record_count: samples.len(),
    };
    let dir = out_dir(cfg).join("data");
    synth::write_dump(&dir, &manifest, &samples)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    println!("wrote {} samples of {} categories to {}", samples.len(), manifest.categories.len(), dir.display());
    Ok(())
}

fn meta_train_cmd(
    cfg: &RunConfig,
    resume: Option<&Path>,
    stop_after: Option<u64>,
    every: u64,
    off: &[String],
) -> Result<()> {
    let dir = out_dir(cfg);
    fs::create_dir_all(&dir)?;
    let s = split(cfg)?;
    let mut state = match resume {
        Some(p) => load_state(p, cfg)?,
        None => {
            let spec = AblationSpec {
                meta_siamese: !off.iter().any(|o| o == "ms"),
                concentration: !off.iter().any(|o| o == "lcon"),
                general_keypoint: !off.iter().any(|o| o == "kp"),
            };
            eprintln!("pre-training on {} categories", s.train.len());
            let pre = pretrain(&s.train, cfg)?;
            TrainState::new(&pre, cfg, spec)?
        }
    };
    let total = meta::total_iterations(&cfg.meta, s.train.len());
    let end = stop_after.map_or(total, |n| n.min(total));
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut log = fs::OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
    let mut smoothed: Option<f64> = None;
    let mut last_stage = None;
    while state.iteration < end {
        let stop = (state.iteration / every + 1) * every;
        let mut lines = Vec::new();
        meta::meta_train(&s.train, cfg, &mut state, Some(stop.min(end)), |r: &LogRecord| {
            if last_stage != Some(r.stage) {
                eprintln!("iteration {} (epoch {}): stage {}", r.iteration, r.epoch, r.stage);
                last_stage = Some(r.stage);
            }
            smoothed = Some(smoothed.map_or(r.query_loss, |s| 0.98 * s + 0.02 * r.query_loss));
            lines.push(serde_json::to_string(r).expect("log records serialize"));
        })?;
        for l in lines {
            writeln!(log, "{l}")?;
        }
        write_checkpoint(&ckpt_path, &state.to_checkpoint(cfg))?;
        eprintln!("iteration {}/{total}: checkpoint written", state.iteration);
    }
    match smoothed {
        Some(s) => println!("final smoothed query loss {s:.4} after {} iterations", state.iteration),
        None => println!("nothing to do: {} of {total} iterations already done", state.iteration),
    }
    Ok(())
}

fn finetune_cmd(cfg: &RunConfig, ckpt: &Path, category: usize, repetition: usize) -> Result<()> {
    let state = load_state(ckpt, cfg)?;
    let s = split(cfg)?;
    let cat = s.test.get(category).with_context(|| format!("test split has {} categories", s.test.len()))?;
    let pool = synth::query_pool(cat, harness::pool_seed(cfg.seed), cfg.eval.query_pool, &cfg.data)?;
    let support =
        synth::support_set(cat, harness::support_seed(cfg.seed, cat.id, repetition), cfg.meta.shot, true, &cfg.data)?;
    let factory = harness::meta_factory(&state, cfg);
    let preds = factory()?.predict(cat, &support, &pool)?;
    let path = out_dir(cfg).join(format!("finetune-c{}-r{repetition}.csv", cat.id));
    fs::create_dir_all(path.parent().expect("joined path has a parent"))?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["query", "error_deg", "flagged"])?;
    let mut errors = Vec::new();
    for (i, (p, q)) in preds.views.iter().zip(&pool).enumerate() {
        let e = if p.flagged {
            harness::FLAGGED_ERROR_DEG
        } else {
            harness::to_degrees(keyview::geometry::rotation_error(&q.rotation, &p.rotation))
        };
        errors.push(e);
        w.write_record([i.to_string(), format!("{e:.6}"), p.flagged.to_string()])?;
    }
    w.flush()?;
    println!(
        "category {}: acc30 {:.4} mederr {:.2}° over {} queries -> {}",
        cat.id,
        harness::acc30(&errors)?,
        harness::mederr(&errors)?,
        errors.len(),
        path.display()
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, ckpt: Option<&Path>, baseline: Option<&str>, reference: Option<&str>) -> Result<ExitCode> {
    let s = split(cfg)?;
    let dir = out_dir(cfg).join("eval");
    let result = match (reference, ckpt) {
        (Some(kind), _) => {
            let c = cfg.clone();
            let seed = cfg.seed;
            let f = move || -> harness::Result<Box<dyn Predictor>> {
                Ok(if kind == "oracle" {
                    Box::new(OraclePredictor { cfg: c.clone() })
                } else {
                    Box::new(RandomPredictor { seed })
                })
            };
            evaluate(&f, &s.test, cfg, kind)?
        }
        (None, Some(p)) => {
            let state = load_state(p, cfg)?;
            match baseline {
                Some(b) => harness::run_baseline(b.parse::<BaselineKind>()?, &pretrained_of(&state)?, &s.test, cfg)?,
                None => {
                    let f = harness::meta_factory(&state, cfg);
                    evaluate(&f, &s.test, cfg, &state.ablation.label())?
                }
            }
        }
        (None, None) => bail!("eval needs --checkpoint or --reference"),
    };
    write_result(&dir, &result)?;
    Ok(gate(cfg, &[result]))
}

fn ablate_cmd(cfg: &RunConfig, ckpt: &Path) -> Result<ExitCode> {
    let pre = pretrained_of(&load_state(ckpt, cfg)?)?;
    let s = split(cfg)?;
    let dir = out_dir(cfg).join("ablate");
    let on = AblationSpec::default();
    let specs = [
        on,
        AblationSpec { meta_siamese: false, ..on },
        AblationSpec { concentration: false, ..on },
        AblationSpec { general_keypoint: false, ..on },
    ];
    let mut results = Vec::new();
    for spec in specs {
        let (_, r) = harness::run_ablation(spec, &s, &pre, cfg)?;
        write_result(&dir, &r)?;
        results.push(r);
    }
    Ok(gate(cfg, &results[..1]))
}

fn sweep_cmd(cfg: &RunConfig, ckpt: &Path, shots: &[usize]) -> Result<ExitCode> {
    let pre = pretrained_of(&load_state(ckpt, cfg)?)?;
    let s = split(cfg)?;
    let dir = out_dir(cfg).join("sweep-shots");
    let results = harness::shot_sweep(shots, &s, &pre, cfg)?;
    let mut w = csv::Writer::from_path({
        fs::create_dir_all(&dir)?;
        dir.join("shots.csv")
    })?;
    w.write_record(["shot", "acc30_mean", "acc30_std", "mederr_mean", "mederr_std"])?;
    for r in &results {
        write_result(&dir, r)?;
        w.write_record([
            r.shot.to_string(),
            r.acc30_mean.to_string(),
            r.acc30_std.to_string(),
            r.mederr_mean.to_string(),
            r.mederr_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn grad_check(trials: usize, seed: u64, first_order: bool) -> Result<ExitCode> {
    const TOL: f64 = 1e-5;
    const BILEVEL_TOL: f64 = 1e-9;
    let mut ok = true;
    let mut reports = gradcheck::check_ops(trials, seed)?;
    reports.extend(gradcheck::check_losses(trials, seed)?);
    for r in &reports {
        let worst = r.worst_second_order.map_or(r.worst_first_order, |s| s.max(r.worst_first_order));
        let pass = worst < TOL;
        ok &= pass;
        let second = r.worst_second_order.map_or("-".to_string(), |s| format!("{s:.2e}"));
        println!(
            "{:<20} {} trials  first {:.2e}  second {second:>8}  {}",
            r.name,
            r.trials,
            r.worst_first_order,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let order = if first_order { UpdateOrder::FirstOrder } else { UpdateOrder::SecondOrder };
    let worst = gradcheck::check_bilevel(trials, seed, order)?;
    let pass = worst < BILEVEL_TOL;
    ok &= pass;
    println!("{:<20} {trials} trials  abs {worst:.2e}  {}", "bilevel-quadratic", if pass { "ok" } else { "FAIL" });
    if first_order {
        println!("note: first-order mode drops the (1 - αa) factor on purpose; checked against b(1 - αa)θ");
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common } => gen_data(&common.config()?).map(|_| ExitCode::SUCCESS),
        Command::MetaTrain { common, resume, stop_after, checkpoint_every, off } => {
            if checkpoint_every == 0 {
                bail!("--checkpoint-every must be at least 1");
            }
            meta_train_cmd(&common.config()?, resume.as_deref(), stop_after, checkpoint_every, &off)
                .map(|_| ExitCode::SUCCESS)
        }
        Command::Finetune { common, checkpoint, category, repetition } => {
            finetune_cmd(&common.config()?, &checkpoint, category, repetition).map(|_| ExitCode::SUCCESS)
        }
        Command::Eval { common, checkpoint, baseline, reference } => {
            eval_cmd(&common.config()?, checkpoint.as_deref(), baseline.as_deref(), reference.as_deref())
        }
        Command::Ablate { common, checkpoint } => ablate_cmd(&common.config()?, &checkpoint),
        Command::SweepShots { common, checkpoint, shots } => sweep_cmd(&common.config()?, &checkpoint, &shots),
        Command::GradCheck { trials, seed, first_order } => grad_check(trials, seed, first_order),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
