use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use a2clpt::checkpoint::{self, Checkpoint};
use a2clpt::config::{apply_kv, format_kv, parse_grid, parse_kv, KeyValue};
use a2clpt::data::{load_dataset, synth_generate, write_dataset, SynthConfig, MANIFEST_FILE};
use a2clpt::evaluator::map_over_thresholds;
use a2clpt::experiment::{ablate, ExperimentConfig};
use a2clpt::localizer::{localize_dataset, read_detections, write_detections, LocalizeConfig};
use a2clpt::trainer::{gradcheck, train_with, TrainConfig, Variant};

const SEED_ENV: &str = "A2CLPT_SEED";
const DEFAULT_GRID: &str = "0.1:0.1:0.9";

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

/// Run options that sit next to the numeric configs.
#[derive(Debug, Clone)]
struct RunOptions {
    variant: Variant,
}

impl KeyValue for RunOptions {
    fn set(&mut self, key: &str, value: &str) -> a2clpt::Result<()> {
        match key {
            "variant" => {
                self.variant = value.parse()?;
                Ok(())
            }
            _ => Err(a2clpt::Error::InvalidInput(format!("unknown key {key:?}"))),
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![("variant", self.variant.to_string())]
    }
}

/// Evaluation and ablation options.
#[derive(Debug, Clone)]
struct GridOptions {
    grid: String,
    holdout: usize,
}

impl KeyValue for GridOptions {
    fn set(&mut self, key: &str, value: &str) -> a2clpt::Result<()> {
        match key {
            "grid" => {
                parse_grid(value)?;
                self.grid = value.to_string();
            }
            "holdout" => self.holdout = a2clpt::config::parse_value(key, value)?,
            _ => return Err(a2clpt::Error::InvalidInput(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![("grid", self.grid.clone()), ("holdout", self.holdout.to_string())]
    }
}

/// One `--<key> VALUE` flag per configuration key, deduplicated.
fn key_args(configs: &[&dyn KeyValue]) -> Vec<Arg> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for c in configs {
        for (k, default) in c.entries() {
            if seen.insert(k) {
                out.push(
                    Arg::new(k)
                        .long(k)
                        .value_name("VALUE")
                        .help(format!("default: {default}"))
                        .help_heading("Settings"),
                );
            }
        }
    }
    out
}

fn config_arg() -> Arg {
    Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("key = value file applied before the flags")
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id)
        .long(id)
        .value_name("PATH")
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

/// Defaults, then the seed variable, then the config file, then flags.
fn resolve(m: &ArgMatches, targets: &mut [&mut dyn KeyValue]) -> CmdResult {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        if targets.iter().any(|t| t.knows("seed")) {
            pairs.push(("seed".into(), seed));
        }
    }
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        pairs.extend(parse_kv(&text).map_err(usage)?);
    }
    let mut flags = BTreeSet::new();
    for t in targets.iter() {
        for (k, _) in t.entries() {
            if flags.insert(k) {
                if let Some(v) = m.try_get_one::<String>(k).ok().flatten() {
                    pairs.push((k.to_string(), v.clone()));
                }
            }
        }
    }
    apply_kv(&pairs, targets).map_err(usage)
}

fn echo_config(path: &Path, configs: &[&dyn KeyValue]) -> anyhow::Result<()> {
    let mut seen = BTreeSet::new();
    let entries: Vec<(&str, String)> = configs
        .iter()
        .flat_map(|c| c.entries())
        .filter(|(k, _)| seen.insert(*k))
        .collect();
    fs::write(path, format_kv(&entries)).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cli() -> Command {
    let synth = SynthConfig::default();
    let train = TrainConfig::default();
    let run = RunOptions {
        variant: Variant::A2clpt,
    };
    let loc = LocalizeConfig::default();
    let eval_opts = GridOptions {
        grid: DEFAULT_GRID.into(),
        holdout: 25,
    };
    let desk = ExperimentConfig::desk(0);
    let threads = Arg::new("threads")
        .long("threads")
        .value_name("N")
        .global(true)
        .value_parser(value_parser!(usize))
        .help("Worker threads for per-video parallelism (0 = all cores)");

    Command::new("a2clpt")
        .about("Weakly-supervised temporal activity localization with angular triplet-center losses")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(threads)
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic two-stream dataset")
                .arg(path_arg("output", "Output directory"))
                .arg(Arg::new("force").long("force").action(ArgAction::SetTrue).help("Overwrite an existing dataset"))
                .arg(config_arg())
                .args(key_args(&[&synth])),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model and write its checkpoint and log")
                .arg(path_arg("data", "Dataset manifest"))
                .arg(path_arg("output", "Checkpoint path"))
                .arg(
                    Arg::new("log")
                        .long("log")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Training log path [default: <output>.log]"),
                )
                .arg(config_arg())
                .args(key_args(&[&train, &run])),
        )
        .subcommand(
            Command::new("infer")
                .about("Localize activities with a trained checkpoint")
                .arg(path_arg("checkpoint", "Checkpoint path"))
                .arg(path_arg("data", "Dataset manifest"))
                .arg(path_arg("output", "Detection file"))
                .arg(config_arg())
                .args(key_args(&[&loc])),
        )
        .subcommand(
            Command::new("eval")
                .about("Score detections against the dataset's ground truth")
                .arg(path_arg("detections", "Detection file"))
                .arg(path_arg("data", "Dataset manifest"))
                .arg(
                    Arg::new("output")
                        .long("output")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Report path; the report is always printed"),
                )
                .arg(config_arg())
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .value_name("GRID")
                        .help(format!("IoU thresholds, a:step:b or a comma list [default: {DEFAULT_GRID}]")),
                ),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic gradients with central differences")
                .arg(
                    Arg::new("tolerance")
                        .long("tolerance")
                        .value_name("TOL")
                        .default_value("1e-4")
                        .value_parser(value_parser!(f64)),
                )
                .arg(
                    Arg::new("instances")
                        .long("instances")
                        .value_name("N")
                        .default_value("1")
                        .value_parser(value_parser!(u64))
                        .help("Check instances seed, seed+1, ..."),
                )
                .arg(config_arg())
                .args(key_args(&[&train, &run])),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train the four ablation variants on synthetic data and compare")
                .long_about(format!(
                    "Train the four ablation variants on synthetic data and compare.\n\n\
                     Each seed generates num-videos training videos plus `holdout` evaluation \
                     videos. Defaults are the desk benchmark (lr {}).",
                    desk.train.lr
                ))
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("0,1,2")
                        .help("Comma-separated seeds"),
                )
                .arg(
                    Arg::new("output")
                        .long("output")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Report path; the report is always printed"),
                )
                .arg(config_arg())
                .args(key_args(&[&desk.synth, &desk.train, &eval_opts])),
        )
}

fn cmd_synth(m: &ArgMatches) -> CmdResult {
    let dir = m.get_one::<PathBuf>("output").expect("required");
    let mut cfg = SynthConfig::default();
    resolve(m, &mut [&mut cfg])?;
    cfg.validate().map_err(usage)?;
    if dir.join(MANIFEST_FILE).exists() && !m.get_flag("force") {
        return Err(anyhow!("{} already holds a dataset; pass --force to overwrite", dir.display()).into());
    }
    let ds = synth_generate(&cfg)?;
    let manifest = write_dataset(&ds, dir)?;
    echo_config(&with_suffix(dir, ".config.txt"), &[&cfg])?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> CmdResult {
    let mut cfg = TrainConfig::default();
    let mut run = RunOptions {
        variant: Variant::A2clpt,
    };
    resolve(m, &mut [&mut cfg, &mut run])?;
    let gamma = cfg.gamma;
    run.variant.apply(&mut cfg, gamma);
    cfg.validate().map_err(usage)?;
    let out = m.get_one::<PathBuf>("output").expect("required");
    let log_path = m
        .get_one::<PathBuf>("log")
        .cloned()
        .unwrap_or_else(|| with_suffix(out, ".log"));
    let ds = load_dataset(m.get_one::<PathBuf>("data").expect("required"))?;
    echo_config(&with_suffix(out, ".config.txt"), &[&cfg, &run])?;
    log::info!(
        "training {} on {} videos for {} iterations",
        run.variant,
        ds.len(),
        cfg.iterations
    );
    let topk_ratio = cfg.topk_ratio;
    let outcome = train_with(&ds, &cfg, |it, net, bank| {
        let path = with_suffix(out, &format!(".iter{it}"));
        log::info!("iteration {it}: checkpoint {}", path.display());
        checkpoint::save(
            &path,
            &Checkpoint {
                network: net.clone(),
                bank: bank.clone(),
                topk_ratio,
            },
        )
    })?;
    checkpoint::save(
        out,
        &Checkpoint {
            network: outcome.network,
            bank: outcome.bank,
            topk_ratio,
        },
    )?;
    fs::write(&log_path, outcome.log.to_text()).with_context(|| format!("writing {}", log_path.display()))?;
    if let Some(last) = outcome.log.last() {
        log::info!("final total loss {:.6}", last.loss.total);
    }
    println!("{}", out.display());
    Ok(())
}

fn cmd_infer(m: &ArgMatches) -> CmdResult {
    let ck = checkpoint::load(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let mut cfg = LocalizeConfig {
        topk_ratio: ck.topk_ratio,
        ..LocalizeConfig::default()
    };
    resolve(m, &mut [&mut cfg])?;
    cfg.validate().map_err(usage)?;
    let ds = load_dataset(m.get_one::<PathBuf>("data").expect("required"))?;
    let dims = ck.network.dims();
    if ds.feature_dim != dims.input_dim || (!ds.is_empty() && ds.num_classes != dims.num_classes) {
        return Err(anyhow!(
            "dataset has D={} C={} but the checkpoint expects D={} C={}",
            ds.feature_dim,
            ds.num_classes,
            dims.input_dim,
            dims.num_classes
        )
        .into());
    }
    let out = m.get_one::<PathBuf>("output").expect("required");
    echo_config(&with_suffix(out, ".config.txt"), &[&cfg])?;
    let per_video = localize_dataset(&ds, &ck.network, &cfg)?;
    for (s, dets) in ds.samples.iter().zip(&per_video) {
        log::info!("{}: {} detections", s.id, dets.len());
    }
    let dets: Vec<_> = per_video.into_iter().flatten().collect();
    write_detections(out, &dets)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> CmdResult {
    let mut opts = GridOptions {
        grid: DEFAULT_GRID.into(),
        holdout: 0,
    };
    let mut pairs = Vec::new();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        pairs.extend(parse_kv(&text).map_err(usage)?);
    }
    if let Some(g) = m.get_one::<String>("grid") {
        pairs.push(("grid".into(), g.clone()));
    }
    apply_kv(&pairs, &mut [&mut opts]).map_err(usage)?;
    let grid = parse_grid(&opts.grid).map_err(usage)?;
    let dets = read_detections(m.get_one::<PathBuf>("detections").expect("required"))?;
    let ds = load_dataset(m.get_one::<PathBuf>("data").expect("required"))?;
    let report = map_over_thresholds(&dets, &ds.ground_truth(), ds.num_classes, &grid)?;
    let text = report.to_text();
    if let Some(out) = m.get_one::<PathBuf>("output") {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        echo_config(&with_suffix(out, ".config.txt"), &[&opts])?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> CmdResult {
    let mut cfg = TrainConfig::default();
    let mut run = RunOptions {
        variant: Variant::A2clpt,
    };
    resolve(m, &mut [&mut cfg, &mut run])?;
    let gamma = cfg.gamma;
    run.variant.apply(&mut cfg, gamma);
    cfg.validate().map_err(usage)?;
    let tol = *m.get_one::<f64>("tolerance").expect("defaulted");
    let count = *m.get_one::<u64>("instances").expect("defaulted");
    let mut ok = true;
    for seed in cfg.seed..cfg.seed + count {
        let report = gradcheck(&cfg, seed)?;
        println!("# instance seed {seed}");
        print!("{}", report.to_text(tol));
        ok &= report.passes(tol);
    }
    if ok {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed at tolerance {tol:e}").into())
    }
}

fn cmd_ablate(m: &ArgMatches) -> CmdResult {
    let mut exp = ExperimentConfig::desk(0);
    let mut opts = GridOptions {
        grid: DEFAULT_GRID.into(),
        holdout: 25,
    };
    resolve(m, &mut [&mut exp.synth, &mut exp.train, &mut opts])?;
    exp.synth.validate().map_err(usage)?;
    exp.train.validate().map_err(usage)?;
    exp.grid = parse_grid(&opts.grid).map_err(usage)?;
    exp.holdout = opts.holdout;
    exp.localize.topk_ratio = exp.train.topk_ratio;
    let seeds: Vec<u64> = m
        .get_one::<String>("seeds")
        .expect("defaulted")
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(anyhow!("invalid --seeds: {e}")))?;
    let report = ablate(&exp, &Variant::ALL, &seeds)?;
    let text = report.to_text();
    if let Some(out) = m.get_one::<PathBuf>("output") {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        echo_config(&with_suffix(out, ".config.txt"), &[&exp.synth, &exp.train, &opts])?;
    }
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(&n) = m.get_one::<usize>("threads") {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match m.subcommand() {
        Some(("synth", sub)) => cmd_synth(sub),
        Some(("train", sub)) => cmd_train(sub),
        Some(("infer", sub)) => cmd_infer(sub),
        Some(("eval", sub)) => cmd_eval(sub),
        Some(("gradcheck", sub)) => cmd_gradcheck(sub),
        Some(("ablate", sub)) => cmd_ablate(sub),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
