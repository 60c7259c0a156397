//! `vrckit`: dataset synthesis, training, evaluation, completion, gradient
//! checks and the classification benchmark behind one binary.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vrckit::classifier::{
    classification_bench, init_classifier, load_classifier, save_classifier, train_classifier,
    BenchSample, ClassifierConfig,
};
use vrckit::geometry::ShapeSpec;
use vrckit::gradcheck::{run_suite, MODULES, TOLERANCE};
use vrckit::io::{load_dataset, read_ply, write_dataset, write_ply, LoadedDataset};
use vrckit::metrics::{MetricReport, CD_DISPLAY_SCALE};
use vrckit::model::{complete, init_vrcnet, load_model};
use vrckit::rng;
use vrckit::training::{evaluate, fit, EvalSample, TrainSample};
use vrckit::views::{build_dataset, desk_resolutions, DatasetOptions, Mode, Split};

use config::{Layers, RunConfig};

#[derive(Parser)]
#[command(name = "vrckit", version, about = "Point-cloud completion toolkit")]
struct Cli {
    /// Worker threads for per-sample parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file overriding the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key, e.g. `--set train.base_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed; falls back to VRCKIT_SEED, then the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Net {
    Vrcnet,
    Classifier,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic partial/complete dataset and its manifest.
    SynthData {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        divisor: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Trains the completion network (or the benchmark classifier).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "vrcnet")]
        net: Net,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Scores a checkpoint at one or more resolutions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated point counts; every manifest resolution by default.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Directory for report.json and config.json; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Completes one partial cloud into `<out>_coarse.ply` and `<out>_fine.ply`.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fine output size; the checkpoint's configured size by default.
        #[arg(long)]
        points: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks; fails if any error reaches the tolerance.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Classifies partial, completed and complete test clouds.
    ClassifyBench {
        #[arg(long)]
        cls_ckpt: PathBuf,
        #[arg(long)]
        cp_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Resolution of the completions and complete clouds.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: vrckit::Error| e.to_string())
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = std::result::Result<(), Failure>;

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve(args: &ConfigArgs) -> std::result::Result<RunConfig, Failure> {
    let env_seed = std::env::var("VRCKIT_SEED").ok();
    usage(RunConfig::resolve(&Layers {
        env_seed: env_seed.as_deref(),
        file: args.config.as_deref(),
        sets: &args.sets,
        seed: args.seed,
    }))
}

fn dispatch(cli: Cli) -> Outcome {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::Usage(anyhow!("--jobs must be at least 1")));
        }
        runtime(
            rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build_global()
                .context("configuring the worker pool"),
        )?;
    }
    match cli.command {
        Command::SynthData {
            mode,
            out,
            divisor,
            cfg,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(m) = mode {
                rc.dataset.mode = m;
            }
            if let Some(d) = divisor {
                rc.dataset.divisor = d;
            }
            synth_data(&rc, &out)
        }
        Command::Train {
            data,
            out,
            net,
            cfg,
        } => {
            let rc = resolve(&cfg)?;
            match net {
                Net::Vrcnet => runtime(train(rc, &data, &out)),
                Net::Classifier => runtime(train_cls(rc, &data, &out)),
            }
        }
        Command::Eval {
            ckpt,
            data,
            resolutions,
            split,
            out,
            cfg,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(r) = resolutions {
                rc.eval.resolutions = r;
            }
            if let Some(s) = split {
                rc.eval.split = s.into();
            }
            runtime(eval(&rc, &ckpt, &data, out.as_deref()))
        }
        Command::Complete {
            ckpt,
            input,
            out,
            points,
            cfg,
        } => {
            let rc = resolve(&cfg)?;
            runtime(complete_file(&rc, &ckpt, &input, &out, points))
        }
        Command::Gradcheck { module } => {
            if let Some(m) = &module {
                if !MODULES.contains(&m.as_str()) {
                    return Err(Failure::Usage(anyhow!(
                        "unknown module `{m}` (expected one of {})",
                        MODULES.join(", ")
                    )));
                }
            }
            runtime(gradcheck(module.as_deref()))
        }
        Command::ClassifyBench {
            cls_ckpt,
            cp_ckpt,
            data,
            points,
            out,
            cfg,
        } => {
            let rc = resolve(&cfg)?;
            runtime(classify_bench(
                &rc,
                &cls_ckpt,
                &cp_ckpt,
                &data,
                points,
                out.as_deref(),
            ))
        }
    }
}

fn synth_data(rc: &RunConfig, out: &Path) -> Outcome {
    let resolutions = usage(desk_resolutions(rc.dataset.divisor).map_err(Into::into))?;
    let families = usage(rc.families())?;
    let data_seed = rng::derive(rc.seed, "dataset");
    let mut spec_rng = rng::stream(data_seed, "specs");
    let specs: Vec<ShapeSpec> = families
        .iter()
        .flat_map(|&f| (0..rc.dataset.shapes_per_family).map(move |_| f))
        .map(|f| ShapeSpec::random(f, &mut spec_rng))
        .collect();
    let opts = DatasetOptions {
        mode: rc.dataset.mode,
        resolutions,
        missing_ratio: rc.dataset.missing_ratio,
        seed: data_seed,
        test_fraction: rc.dataset.test_fraction,
        camera_radius: rc.dataset.camera_radius,
        views: rc.dataset.views.clone(),
    };
    runtime((|| {
        let start = std::time::Instant::now();
        let pairs = build_dataset(&specs, &opts).context("synth-data: generating pairs")?;
        fs::create_dir_all(out)
            .with_context(|| format!("synth-data: creating {}", out.display()))?;
        let hash = write_dataset(
            out,
            "synthetic",
            rc.dataset.mode,
            rc.seed,
            rc.dataset.divisor,
            &pairs,
        )
        .with_context(|| format!("synth-data: writing {}", out.display()))?;
        rc.echo(out).context("synth-data")?;
        log::info!(
            "{} pairs from {} shapes in {:.1?}",
            pairs.len(),
            specs.len(),
            start.elapsed()
        );
        println!("{hash}");
        Ok(())
    })())
}

fn open_dataset(stage: &str, data: &Path) -> Result<LoadedDataset> {
    load_dataset(data).with_context(|| format!("{stage}: loading dataset {}", data.display()))
}

fn train(mut rc: RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = open_dataset("train", data)?;
    let res = rc.train.gt_resolution;
    let samples: Vec<TrainSample> = ds
        .split(Split::Train)
        .map(|p| {
            let target = p.gts.get(&res).cloned().ok_or_else(|| {
                anyhow!(
                    "train: pair {} has no {res}-point ground truth",
                    p.record.pair_id
                )
            })?;
            Ok(TrainSample {
                partial: p.partial.clone(),
                target,
            })
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        bail!("train: dataset {} has no training pairs", data.display());
    }
    rc.train.seed = rng::derive(rc.seed, "training");
    fs::create_dir_all(out).with_context(|| format!("train: creating {}", out.display()))?;
    rc.echo(out).context("train")?;
    let mut reg = init_vrcnet(&rc.model, rc.seed).context("train: initializing parameters")?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path)
            .with_context(|| format!("train: creating {}", log_path.display()))?,
    );
    log::info!(
        "training on {} pairs ({} parameters)",
        samples.len(),
        reg.numel()
    );
    let records = fit(
        &mut reg,
        &rc.model,
        &samples,
        &rc.train,
        &rc.loss,
        Some(out),
        |r| {
            serde_json::to_writer(&mut log, r)?;
            log.write_all(b"\n")?;
            if (r.step + 1) % 50 == 0 {
                log::info!(
                    "step {} epoch {} total {:.5} cd_fine {:.5}",
                    r.step + 1,
                    r.epoch,
                    r.total,
                    r.cd_fine
                );
            }
            Ok(())
        },
    )
    .context("train: optimizing")?;
    log.flush()
        .with_context(|| format!("train: writing {}", log_path.display()))?;
    log::info!(
        "{} steps; checkpoint {}",
        records.len(),
        out.join("final").display()
    );
    Ok(())
}

fn train_cls(mut rc: RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = open_dataset("train", data)?;
    let res = rc.train.gt_resolution;
    let mut categories: Vec<String> = ds.pairs.iter().map(|p| p.record.category.clone()).collect();
    categories.sort();
    categories.dedup();
    let cfg = ClassifierConfig {
        trunk: rc.classifier.trunk.clone(),
        head_hidden: rc.classifier.head_hidden,
        categories,
    };
    let mut seen = std::collections::BTreeSet::new();
    let mut set = Vec::new();
    for p in ds.split(Split::Train) {
        if seen.insert(p.record.shape_id.clone()) {
            let gt = p.gts.get(&res).ok_or_else(|| {
                anyhow!(
                    "train: pair {} has no {res}-point ground truth",
                    p.record.pair_id
                )
            })?;
            set.push((gt.clone(), cfg.label(&p.record.category)?));
        }
    }
    rc.classifier.train.seed = rng::derive(rc.seed, "classifier.training");
    fs::create_dir_all(out).with_context(|| format!("train: creating {}", out.display()))?;
    rc.echo(out).context("train")?;
    let mut reg = init_classifier(&cfg, rc.seed).context("train: initializing classifier")?;
    let losses = train_classifier(&mut reg, &cfg, &set, &rc.classifier.train)
        .context("train: optimizing classifier")?;
    let log_path = out.join("classifier_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path)
            .with_context(|| format!("train: creating {}", log_path.display()))?,
    );
    for (step, loss) in losses.iter().enumerate() {
        writeln!(log, "{}", serde_json::json!({ "step": step, "loss": loss }))?;
    }
    log.flush()?;
    save_classifier(&out.join("classifier"), &reg, &cfg).context("train")?;
    log::info!(
        "classifier trained on {} shapes; final loss {:.4}",
        set.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    manifest_hash: String,
    split: Split,
    /// Multiply `cd` fields by this for the customary display unit.
    cd_display_scale: f64,
    results: BTreeMap<usize, MetricReport>,
}

fn write_report<T: Serialize>(
    rc: &RunConfig,
    value: &T,
    out: Option<&Path>,
    file: &str,
    stage: &str,
) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("{stage}: creating {}", dir.display()))?;
            let path = dir.join(file);
            fs::write(&path, text)
                .with_context(|| format!("{stage}: writing {}", path.display()))?;
            rc.echo(dir).context(stage.to_string())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(rc: &RunConfig, ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (reg, model) =
        load_model(ckpt).with_context(|| format!("eval: loading checkpoint {}", ckpt.display()))?;
    let ds = open_dataset("eval", data)?;
    let samples: Vec<EvalSample> = ds
        .split(rc.eval.split)
        .map(|p| EvalSample {
            category: p.record.category.clone(),
            partial: p.partial.clone(),
            gts: p.gts.clone(),
        })
        .collect();
    if samples.is_empty() {
        bail!(
            "eval: dataset {} has no {:?} pairs",
            data.display(),
            rc.eval.split
        );
    }
    let resolutions = if rc.eval.resolutions.is_empty() {
        let mut r: Vec<usize> = samples[0].gts.keys().copied().collect();
        r.retain(|&n| {
            model
                .renet
                .ratio_for(samples[0].partial.len() + model.pmnet.coarse_n, n)
                .is_ok()
        });
        r
    } else {
        rc.eval.resolutions.clone()
    };
    let results = evaluate(&reg, &model, &samples, &resolutions)
        .with_context(|| format!("eval: scoring {}", ckpt.display()))?;
    for (n, r) in &results {
        log::info!(
            "{n} points: CD {:.3} (x1e4), F-score {:.4}",
            r.cd * CD_DISPLAY_SCALE,
            r.fscore
        );
    }
    let report = EvalOutput {
        checkpoint: ckpt.display().to_string(),
        manifest_hash: ds.hash.clone(),
        split: rc.eval.split,
        cd_display_scale: CD_DISPLAY_SCALE,
        results,
    };
    write_report(rc, &report, out, "report.json", "eval")
}

fn sibling(prefix: &Path, suffix: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn complete_file(
    rc: &RunConfig,
    ckpt: &Path,
    input: &Path,
    out: &Path,
    points: Option<usize>,
) -> Result<()> {
    let (reg, model) = load_model(ckpt)
        .with_context(|| format!("complete: loading checkpoint {}", ckpt.display()))?;
    let cloud =
        read_ply(input).with_context(|| format!("complete: reading {}", input.display()))?;
    let n = points.unwrap_or(model.renet.output_n);
    let c = complete(&reg, &model, &cloud, n)
        .with_context(|| format!("complete: completing {}", input.display()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("complete: creating {}", dir.display()))?;
    }
    for (suffix, cloud) in [("_coarse.ply", &c.coarse), ("_fine.ply", &c.fine)] {
        let path = sibling(out, suffix);
        write_ply(cloud, &path).with_context(|| format!("complete: writing {}", path.display()))?;
    }
    rc.echo_to(&sibling(out, "_config.json"))
        .context("complete")?;
    log::info!(
        "{} → {} coarse + {} fine points",
        cloud.len(),
        c.coarse.len(),
        c.fine.len()
    );
    Ok(())
}

fn gradcheck(module: Option<&str>) -> Result<()> {
    let entries = run_suite(module).context("gradcheck")?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        if !e.passed() {
            failed += 1;
        }
        println!(
            "{:<11} {:<14} {:>9.2e} {:>6} coords  {:<4} {}",
            e.module, e.name, e.max_rel_error, e.coords, status, e.worst
        );
    }
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} checks, max relative error {worst:.2e}, tolerance {TOLERANCE:.0e}",
        entries.len()
    );
    if failed > 0 {
        bail!("gradcheck: {failed} check(s) at or above {TOLERANCE:.0e}");
    }
    Ok(())
}

fn classify_bench(
    rc: &RunConfig,
    cls_ckpt: &Path,
    cp_ckpt: &Path,
    data: &Path,
    points: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let (creg, ccfg) = load_classifier(cls_ckpt)
        .with_context(|| format!("classify-bench: loading classifier {}", cls_ckpt.display()))?;
    let (reg, model) = load_model(cp_ckpt)
        .with_context(|| format!("classify-bench: loading checkpoint {}", cp_ckpt.display()))?;
    let ds = open_dataset("classify-bench", data)?;
    let n = points.unwrap_or(rc.train.gt_resolution);
    let samples: Vec<BenchSample> = ds
        .split(rc.eval.split)
        .map(|p| {
            let complete = p.gts.get(&n).cloned().ok_or_else(|| {
                anyhow!(
                    "classify-bench: pair {} has no {n}-point ground truth",
                    p.record.pair_id
                )
            })?;
            Ok(BenchSample {
                category: p.record.category.clone(),
                partial: p.partial.clone(),
                complete,
            })
        })
        .collect::<Result<_>>()?;
    let report = classification_bench(&creg, &ccfg, &samples, |s| {
        Ok(complete(&reg, &model, &s.partial, n)?.fine)
    })
    .context("classify-bench: classifying")?;
    log::info!(
        "accuracy partial {:.3}, completed {:.3}, complete {:.3}",
        report.acc_partial,
        report.acc_completed,
        report.acc_complete
    );
    write_report(rc, &report, out, "bench.json", "classify-bench")
}
