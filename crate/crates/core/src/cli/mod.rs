//! Command-line entry point: `pretrain`, `train`, `infer`, `eval`,
//! `export-edges` and `selftest`.

mod selftest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::{keys_for, RunConfig, DATA_ROOT_ENV};
use crate::edge::{EdgeMapSet, LEVEL_FACTORS};
use crate::inference::{binarize, predict_volume};
use crate::metrics::{evaluate_dirs, report_csv, report_text};
use crate::network::{Checkpoint, Mode, Model, NetworkConfig};
use crate::trainer::{Dataset, Trainer};
use crate::volume_io::{read_metaimage, write_metaimage, VolumeKind};
use crate::{Error, Result, Scalar};

const SUBCOMMANDS: [(&str, &str); 6] = [
    ("pretrain", "Train the encoder with the simple decoder (cross-entropy)"),
    ("train", "Train the full edge-supervised model"),
    ("infer", "Segment one MetaImage volume with a trained checkpoint"),
    ("eval", "Score predicted masks against ground truth"),
    ("export-edges", "Write the three edge-target maps of a label volume"),
    ("selftest", "Run the phantom-based invariant suite"),
];

const KEY_HEADING: &str = "Configuration keys";

fn value_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id).value_name("VALUE").help(help)
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .about(about)
        .arg(value_arg("config", "File of `key = value` lines; flags override it"))
        .arg(value_arg("run-dir", "Use this run directory instead of a timestamped one under run.dir"));
    cmd = match name {
        "pretrain" | "train" => cmd.arg(value_arg("max-iterations", "Shorthand for --train.max_iterations")),
        "infer" => cmd
            .arg(value_arg("checkpoint", "Trained model checkpoint").required(true))
            .arg(value_arg("input", "Input image (.mhd)").required(true))
            .arg(value_arg("output", "Output binary mask (.mhd)").required(true))
            .arg(value_arg("prob-output", "Also write the probability map (.mhd)"))
            .arg(value_arg("threshold", "Shorthand for --infer.threshold"))
            .arg(Arg::new("lcc").long("lcc").action(ArgAction::SetTrue).help("Shorthand for --infer.lcc true")),
        "eval" => cmd
            .arg(value_arg("pred-dir", "Directory of predicted masks").required(true))
            .arg(value_arg("gt-dir", "Directory of ground-truth masks").required(true))
            .arg(value_arg("report", "CSV report path; a text rendering is written next to it").required(true)),
        "export-edges" => cmd
            .arg(value_arg("input", "Label volume (.mhd)").required(true))
            .arg(value_arg("output-dir", "Where to write the maps (default: the run directory)")),
        _ => cmd,
    };
    for k in keys_for(name) {
        let default = if k.default.is_empty() { "unset" } else { k.default };
        cmd = cmd.arg(
            Arg::new(k.key)
                .long(k.key)
                .value_name("VALUE")
                .help(format!("{} [default: {default}]", k.help))
                .help_heading(KEY_HEADING),
        );
    }
    cmd
}

pub fn command() -> Command {
    let mut root = Command::new("edgeseg")
        .about("Boundary-aware 3D segmentation")
        .after_help(format!("Environment: {DATA_ROOT_ENV} sets the default data.root."))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        root = root.subcommand(subcommand(name, about));
    }
    root
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status. Errors are printed as `error[<category>]: ...`.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let Some((name, sub)) = matches.subcommand() else { return 2 };
    match dispatch(name, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

fn arg<'a>(m: &'a ArgMatches, id: &str) -> Option<&'a String> {
    m.try_get_one::<String>(id).ok().flatten()
}

fn required<'a>(m: &'a ArgMatches, id: &str) -> Result<&'a String> {
    arg(m, id).ok_or_else(|| Error::Usage(format!("--{id} is required")))
}

/// Defaults, then the config file, then `--key value` flags.
fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults(name);
    if let Some(p) = arg(m, "config") {
        cfg.apply_file(Path::new(p))?;
    }
    for k in keys_for(name) {
        if let Some(v) = arg(m, k.key) {
            cfg.set(k.key, v.as_str())?;
        }
    }
    if let Some(v) = arg(m, "max-iterations") {
        cfg.set("train.max_iterations", v.as_str())?;
    }
    if let Some(v) = arg(m, "threshold") {
        cfg.set("infer.threshold", v.as_str())?;
    }
    if m.try_get_one::<bool>("lcc").ok().flatten() == Some(&true) {
        cfg.set("infer.lcc", "true")?;
    }
    Ok(cfg)
}

/// Creates the run directory and writes the resolved configuration into it.
fn open_run_dir(cfg: &RunConfig, m: &ArgMatches) -> Result<PathBuf> {
    let dir = match arg(m, "run-dir") {
        Some(d) => PathBuf::from(d),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = Path::new(cfg.get("run.dir")).join(format!("{}-{stamp}", cfg.command()));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("config.cfg");
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<()> {
    let mut cfg = resolve(name, m)?;
    match name {
        "pretrain" | "train" => {
            let mode = if name == "pretrain" { Mode::Pretrain } else { Mode::Full };
            match precision(&cfg)? {
                Precision::F32 => train_cmd::<f32>(mode, &mut cfg, m),
                Precision::F64 => train_cmd::<f64>(mode, &mut cfg, m),
            }
        }
        "infer" => match precision(&cfg)? {
            Precision::F32 => infer_cmd::<f32>(&cfg, m),
            Precision::F64 => infer_cmd::<f64>(&cfg, m),
        },
        "eval" => eval_cmd(&cfg, m),
        "export-edges" => export_edges_cmd(&cfg, m),
        "selftest" => {
            let dir = open_run_dir(&cfg, m)?;
            selftest::run(&dir)
        }
        other => Err(Error::Usage(format!("unknown subcommand {other}"))),
    }
}

enum Precision {
    F32,
    F64,
}

fn precision(cfg: &RunConfig) -> Result<Precision> {
    match cfg.get("run.precision") {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Config(format!("run.precision must be f32 or f64, got {other:?}"))),
    }
}

fn train_cmd<T: Scalar>(mode: Mode, cfg: &mut RunConfig, m: &ArgMatches) -> Result<()> {
    let tc = cfg.resolve_train(mode)?;
    let pre = cfg.preprocess()?;
    let root = cfg
        .path("data.root")
        .ok_or_else(|| Error::Usage(format!("data.root is not set; pass --data.root or set {DATA_ROOT_ENV}")))?;
    let holdout: usize = cfg.parse("train.holdout")?;
    let dataset = Dataset::<T>::load_dir(&root, &pre)?;
    if holdout >= dataset.len() {
        return Err(Error::Config(format!("train.holdout ({holdout}) leaves no training cases out of {}", dataset.len())));
    }
    let (train_set, held) = dataset.split_last(holdout);
    let run_dir = open_run_dir(cfg, m)?;
    let ids: String = held.cases().iter().map(|c| format!("{}\n", c.id)).collect();
    let holdout_path = run_dir.join("holdout.txt");
    fs::write(&holdout_path, ids).map_err(|e| Error::io(&holdout_path, e))?;
    println!("run directory: {}", run_dir.display());
    println!("{} training cases, {} held out", train_set.len(), held.len());

    let resume = cfg.path("train.resume");
    let mut trainer = match &resume {
        Some(p) => Trainer::resume(tc, train_set, p)?,
        None => Trainer::new(tc, train_set)?,
    };
    if let (Some(p), None) = (cfg.path("train.encoder_checkpoint"), &resume) {
        let strict: bool = cfg.parse("train.encoder_strict")?;
        let report = trainer.load_encoder(&p, strict)?;
        println!("warm start: {} encoder tensors from {}", report.loaded, p.display());
        for s in report.skipped.iter().chain(&report.missing) {
            println!("  not loaded: {s}");
        }
    }
    let ck = trainer.run(&run_dir)?;
    if let Some(last) = trainer.history().last() {
        println!("iteration {}: loss {:.6}, dice {:.6}", last.iteration, last.total, last.dice);
    }
    println!("checkpoint: {}", ck.display());
    Ok(())
}

fn infer_cmd<T: Scalar>(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let icfg = cfg.infer_config()?;
    let pre = cfg.preprocess()?;
    let ck_path = PathBuf::from(required(m, "checkpoint")?);
    let ck = Checkpoint::<T>::load(&ck_path)?;
    let network: NetworkConfig = match ck.meta.extra.get("network") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Load(format!("{}: bad network metadata: {e}", ck_path.display())))?,
        None => cfg.network()?,
    };
    let mode: Mode = ck.meta.mode.parse().map_err(|_| Error::Load(format!("unknown mode {:?}", ck.meta.mode)))?;
    let mut model = Model::<T>::new(&network, mode, 0)?;
    ck.restore_model(&mut model)?;
    let run_dir = open_run_dir(cfg, m)?;
    let input = required(m, "input")?;
    let image = read_metaimage::<T>(input, VolumeKind::Image)?;
    let prob = predict_volume(&model, &image, &pre, &icfg)?.with_origin(image.origin());
    let mask = binarize(&prob, icfg.threshold, icfg.lcc)?;
    let output = required(m, "output")?;
    write_metaimage(&mask, output)?;
    if let Some(p) = arg(m, "prob-output") {
        write_metaimage(&prob, p)?;
    }
    println!("run directory: {}", run_dir.display());
    println!("{} foreground voxels written to {output}", mask.foreground_count());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let reports = evaluate_dirs(Path::new(required(m, "pred-dir")?), Path::new(required(m, "gt-dir")?))?;
    let csv = report_csv(&reports)?;
    let text = report_text(&reports);
    let report = PathBuf::from(required(m, "report")?);
    let mut text_path = report.with_extension("txt");
    if text_path == report {
        text_path = PathBuf::from(format!("{}.txt", report.display()));
    }
    let run_dir = open_run_dir(cfg, m)?;
    for (path, body) in [(&report, &csv), (&text_path, &text), (&run_dir.join("report.csv"), &csv)] {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    print!("{text}");
    Ok(())
}

fn export_edges_cmd(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let label = read_metaimage::<f64>(required(m, "input")?, VolumeKind::Label)?;
    let set = EdgeMapSet::from_mask(&label, cfg.edge_extractor()?)?;
    let run_dir = open_run_dir(cfg, m)?;
    let out = arg(m, "output-dir").map(PathBuf::from).unwrap_or(run_dir);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (map, f) in set.maps.iter().zip(LEVEL_FACTORS) {
        let path = out.join(format!("edge_{}x{}x{}.mhd", f[0], f[1], f[2]));
        write_metaimage(map, &path)?;
        println!("{} {:?}", path.display(), map.dims());
    }
    Ok(())
}
