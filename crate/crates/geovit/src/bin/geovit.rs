//! Command-line front end: dataset synthesis, training, evaluation, and
//! gradient checking. Every run is deterministic given its flags, and the
//! resolved configuration is echoed into each artifact it produces.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use geovit::checkpoint::{load_checkpoint, save_checkpoint};
use geovit::data::{load_dataset, save_dataset, Dataset};
use geovit::error::{Error, Result};
use geovit::gradcheck::{run_gradcheck, TOLERANCE};
use geovit::metrics::{evaluate, logits_to_mask};
use geovit::model::{Model, ModelConfig, Variant};
use geovit::tensor::{gvt, set_backward_fault};
use geovit::train::{train_loop, TrainConfig};

fn parse_variant(s: &str) -> Result<Variant> {
    s.parse()
}

#[derive(Clone, Copy, PartialEq)]
enum Split {
    Train,
    Eval,
    All,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        "all" => Ok(Split::All),
        other => Err(Error::config(format!(
            "unknown split {other:?}, expected train, eval, or all"
        ))),
    }
}

#[derive(Parser)]
#[command(
    name = "geovit",
    about = "Plume segmentation and gas regression on synthetic satellite scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a history file
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset and write a JSON report
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// co2 or no2 (may also come from the config file)
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flat keys, CLI flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Dataset directory produced by `synth`
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimization steps to run now (a resumed run continues its count)
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and history.jsonl
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint directory written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Where to write the JSON metrics report
    #[arg(long)]
    report: PathBuf,
    /// Portion of the dataset to score: train, eval, or all
    #[arg(long, value_parser = parse_split, default_value = "all")]
    split: Split,
    /// Write predicted segmentation masks as .gvt files into this directory
    #[arg(long)]
    dump_masks: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single variant; both run when omitted
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_backward_fault: Option<String>,
}

/// Flat JSON config file: any subset of model and optimizer keys. Unknown
/// keys are rejected so typos fail loudly.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    variant: Option<Variant>,
    image_size: Option<usize>,
    patch_size: Option<usize>,
    embed_dim: Option<usize>,
    num_heads: Option<usize>,
    depth: Option<usize>,
    ffn_ratio: Option<usize>,
    tap_depths: Option<Vec<usize>>,
    decoder_dim: Option<usize>,
    s2_bands: Option<usize>,
    s5p_bands: Option<usize>,
    num_fuel_classes: Option<usize>,
    num_seg_classes: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    weight_decay: Option<f64>,
    label_smoothing: Option<f64>,
    lambda_seg: Option<f64>,
    lambda_cls: Option<f64>,
    lambda_reg: Option<f64>,
    batch_size: Option<usize>,
    steps: Option<u64>,
    seed: Option<u64>,
    eval_every: Option<u64>,
    augment: Option<bool>,
    crop_pad: Option<usize>,
    flip_prob: Option<f64>,
    brightness_range: Option<[f64; 2]>,
    contrast_range: Option<[f64; 2]>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }

    fn apply_model(&self, m: &mut ModelConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    m.$field = v;
                }
            };
        }
        set!(image_size);
        set!(patch_size);
        set!(embed_dim);
        set!(num_heads);
        set!(depth);
        set!(ffn_ratio);
        set!(tap_depths);
        set!(decoder_dim);
        set!(s2_bands);
        set!(s5p_bands);
        set!(num_fuel_classes);
        set!(num_seg_classes);
    }

    fn apply_train(&self, t: &mut TrainConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    t.$field = v;
                }
            };
        }
        set!(lr);
        set!(beta1);
        set!(beta2);
        set!(eps);
        set!(weight_decay);
        set!(label_smoothing);
        set!(lambda_seg);
        set!(lambda_cls);
        set!(lambda_reg);
        set!(batch_size);
        set!(steps);
        set!(seed);
        set!(eval_every);
        set!(augment);
        set!(crop_pad);
        set!(flip_prob);
        set!(brightness_range);
        set!(contrast_range);
    }
}

/// Flat union of the resolved model and optimizer settings, embedded in
/// every artifact for provenance.
fn config_echo(mcfg: &ModelConfig, tcfg: Option<&TrainConfig>) -> Result<Value> {
    let mut obj = match serde_json::to_value(mcfg)? {
        Value::Object(o) => o,
        _ => Map::new(),
    };
    if let Some(t) = tcfg {
        if let Value::Object(o) = serde_json::to_value(t)? {
            obj.extend(o);
        }
    }
    Ok(Value::Object(obj))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let variant = a.variant.or(file.variant).ok_or_else(|| {
        Error::config("no variant given: pass --variant or set \"variant\" in the config file")
    })?;
    let mut mcfg = ModelConfig::default_for(variant);
    file.apply_model(&mut mcfg);
    mcfg.validate()?;

    let ds = Dataset::<f32>::generate(&mcfg, a.count, a.seed)?;
    let mut echo = config_echo(&mcfg, None)?;
    if let Some(obj) = echo.as_object_mut() {
        obj.insert("count".into(), a.count.into());
        obj.insert("seed".into(), a.seed.into());
    }
    save_dataset(&ds, &a.out, Some(echo))?;

    if ds.is_empty() {
        eprintln!("warning: wrote an empty dataset");
    }
    println!("wrote {} {} samples to {}", ds.len(), variant, a.out.display());
    if ds.is_empty() {
        println!("plume frequency: n/a");
        return Ok(());
    }
    match variant {
        Variant::Co2 => {
            let with_plume = ds
                .samples
                .iter()
                .filter(|s| {
                    s.mask
                        .as_ref()
                        .is_some_and(|m| m.data().iter().any(|v| *v > 0.5))
                })
                .count();
            println!(
                "plume frequency: {:.3}",
                with_plume as f64 / ds.len() as f64
            );
        }
        Variant::No2 => println!("plume frequency: n/a"),
    }
    let targets: Vec<f64> = ds.samples.iter().map(|s| s.target).collect();
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets.len() as f64;
    let min = targets.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "targets: mean {mean:.4} std {:.4} min {min:.4} max {max:.4}",
        var.sqrt()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let ds = load_dataset::<f32>(&a.data)?;

    let (mut model, mut tcfg) = match &a.resume {
        Some(ckpt) => {
            let (model, meta) = load_checkpoint::<f32>(ckpt)?;
            if let Some(v) = a.variant.or(file.variant) {
                if v != model.variant() {
                    return Err(Error::config(format!(
                        "checkpoint holds a {} model but the run asked for {v}",
                        model.variant()
                    )));
                }
            }
            let mut candidate = model.config().clone();
            file.apply_model(&mut candidate);
            if candidate != *model.config() {
                return Err(Error::config(
                    "resume cannot change the model configuration; drop the model keys from the config file",
                ));
            }
            (model, meta.train_config)
        }
        None => {
            let variant = a.variant.or(file.variant).unwrap_or(ds.variant);
            let mut mcfg = ModelConfig::default_for(variant);
            file.apply_model(&mut mcfg);
            mcfg.validate()?;
            let mut tcfg = TrainConfig::default();
            file.apply_train(&mut tcfg);
            let mut model = Model::<f32>::new(mcfg)?;
            let seed = a.seed.unwrap_or(tcfg.seed);
            model.init(seed);
            (model, tcfg)
        }
    };
    if a.resume.is_some() {
        file.apply_train(&mut tcfg);
    }
    if let Some(steps) = a.steps {
        tcfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        tcfg.seed = seed;
    }
    tcfg.validate()?;

    if model.variant() != ds.variant {
        return Err(Error::config(format!(
            "dataset at {} holds {} samples but the run expects {}",
            a.data.display(),
            ds.variant,
            model.variant()
        )));
    }

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let hist_path = a.out.join("history.jsonl");
    let mut hist = fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    let echo = config_echo(model.config(), Some(&tcfg))?;
    writeln!(hist, "{}", json!({ "config": echo })).map_err(|e| Error::io(&hist_path, e))?;

    let start_step = model.store().step_count();
    let outcome = train_loop(&mut model, &ds, &tcfg, |rec| {
        writeln!(hist, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&hist_path, e))
    })?;

    save_checkpoint(
        &a.out.join("last"),
        model.store(),
        model.config(),
        &tcfg,
        &ds.norm,
    )?;
    if let Some(best) = &outcome.best {
        save_checkpoint(&a.out.join("best"), &best.store, model.config(), &tcfg, &ds.norm)?;
        println!(
            "best checkpoint: step {} score {:.4} -> {}",
            best.step,
            best.score,
            a.out.join("best").display()
        );
    }

    let ran = model.store().step_count() - start_step;
    match outcome.history.last() {
        Some(last) => println!(
            "trained {ran} steps (now at step {}), final loss {:.6}",
            model.store().step_count(),
            last.loss
        ),
        None => println!("trained 0 steps, wrote the initial state"),
    }
    println!("last checkpoint: {}", a.out.join("last").display());
    println!("history: {}", hist_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    let ds = load_dataset::<f32>(&a.data)?;
    if ds.variant != model.variant() {
        return Err(Error::config(format!(
            "dataset at {} holds {} samples but the checkpoint is a {} model",
            a.data.display(),
            ds.variant,
            model.variant()
        )));
    }
    let (samples, base_index) = match a.split {
        Split::Train => (ds.train(), 0),
        Split::Eval => (ds.eval(), ds.train_count()),
        Split::All => (&ds.samples[..], 0),
    };
    // destandardize with the statistics the checkpoint was trained under
    let report = evaluate(&model, samples, &meta.norm)?;

    let mut doc = Map::new();
    doc.insert("variant".into(), model.variant().to_string().into());
    if let Value::Object(fields) = serde_json::to_value(&report)? {
        doc.extend(fields);
    }
    doc.insert("config".into(), config_echo(model.config(), Some(&meta.train_config))?);
    let text = serde_json::to_string_pretty(&Value::Object(doc))?;
    fs::write(&a.report, text + "\n").map_err(|e| Error::io(&a.report, e))?;

    let mut line = format!(
        "eval {} on {} samples: r2 {:.4} mae {:.4} mse {:.4}",
        model.variant(),
        report.n_samples,
        report.r2,
        report.mae,
        report.mse
    );
    if let Some(iou) = report.seg_iou {
        line += &format!(" iou {iou:.4}");
    }
    if let Some(acc) = report.cls_accuracy {
        line += &format!(" acc {acc:.4}");
    }
    println!("{line}");
    println!("report: {}", a.report.display());

    if let Some(dir) = &a.dump_masks {
        match &model {
            Model::Co2(m) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let pt = model.store().frozen();
                for (j, s) in samples.iter().enumerate() {
                    let weather = s.weather.as_ref().ok_or_else(|| {
                        Error::contract("co2 sample lacks a weather vector")
                    })?;
                    let out = m.forward(&pt, &s.s2, weather)?;
                    let mask = logits_to_mask(&out.seg_logits)?;
                    let path = dir.join(format!("mask_{:05}.gvt", base_index + j));
                    gvt::write_mask(&path, &mask)?;
                }
                println!("wrote {} predicted masks to {}", samples.len(), dir.display());
            }
            Model::No2(_) => {
                eprintln!("warning: --dump-masks ignored, the no2 variant has no segmentation head");
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if let Some(op) = &a.inject_backward_fault {
        set_backward_fault(Some(op));
    }
    let variants = match a.variant {
        Some(v) => vec![v],
        None => vec![Variant::Co2, Variant::No2],
    };
    let mut failed = Vec::new();
    for v in variants {
        let r = run_gradcheck(v, a.seed);
        if r.is_err() {
            set_backward_fault(None);
        }
        let r = r?;
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "gradcheck {v}: max rel error {:.3e} over {} coords in {} params (tolerance {TOLERANCE:.0e}): {status}",
            r.max_rel_error, r.coords_checked, r.params_checked
        );
        if !r.passed() {
            println!(
                "  worst: {}[{}] analytic {:.6e} vs numeric {:.6e}",
                r.worst_param, r.worst_coord, r.analytic, r.numeric
            );
            failed.push(v.to_string());
        }
    }
    set_backward_fault(None);
    if failed.is_empty() {
        return Ok(());
    }
    let mut msg = format!("gradient check failed for {}", failed.join(", "));
    if let Some(op) = &a.inject_backward_fault {
        msg += &format!(" under injected backward fault on \"{op}\"");
    }
    Err(Error::numerical(msg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
