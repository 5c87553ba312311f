//! The subcommand bodies. Each one is a thin orchestration over the core
//! library: parse and merge settings, validate once, run, report paths and
//! headline numbers on stdout.

use std::path::{Path, PathBuf};

use crowdcount_core::densitymap::{AnnotationFormat, LabelSpec};
use crowdcount_core::eval::{evaluate, write_report, write_scatter_csv};
use crowdcount_core::imgio::{read_ppm, write_density_csv};
use crowdcount_core::model::load_checkpoint;
use crowdcount_core::synthdata::{generate_split, Background, SceneSpec};
use crowdcount_core::train::train_loop;

use crate::config::RunConfig;
use crate::data::{load_dir, to_eval_samples, to_train_samples};
use crate::{CliError, EvalArgs, GenLabelsArgs, PredictArgs, SynthArgs, TrainArgs};

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let background = match args.background.as_str() {
        "flat" => Background::Flat,
        "gradient" => Background::Gradient,
        "noise" => Background::Noise,
        other => {
            return Err(CliError::config(format!(
                "unknown background `{}`; expected flat, gradient, or noise",
                other
            )))
        }
    };
    let template = SceneSpec {
        width: args.width,
        height: args.height,
        n_points: args.min_heads,
        head_radius_range: (args.radius_min, args.radius_max),
        background,
        clustered: args.clustered,
        seed: 0,
    };
    let manifest = generate_split(
        &args.out,
        args.train,
        args.test,
        &template,
        (args.min_heads, args.max_heads),
        args.seed,
    )?;
    println!(
        "wrote {} train and {} test scenes under {}",
        manifest.train.len(),
        manifest.test.len(),
        args.out.display()
    );
    println!("manifest: {}", args.out.join("manifest.json").display());
    Ok(())
}

pub fn cmd_gen_labels(args: &GenLabelsArgs) -> Result<(), CliError> {
    let spec = match args.mode.as_str() {
        "fixed" => LabelSpec::Fixed { sigma: args.sigma },
        "adaptive" => LabelSpec::Adaptive {
            k: args.k,
            beta: args.beta,
            sigma_min: args.sigma_min,
            sigma_max: args.sigma_max,
        },
        other => {
            return Err(CliError::config(format!(
                "unknown label mode `{}`; expected fixed or adaptive",
                other
            )))
        }
    };
    let issues = spec.issues();
    if !issues.is_empty() {
        return Err(CliError::config(format!(
            "invalid label settings:\n  {}",
            issues.join("\n  ")
        )));
    }

    let format = annotation_format(&args.format)?;
    let out_dir = args.out.clone().unwrap_or_else(|| args.data.clone());
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("{}: {}", out_dir.display(), e)))?;

    let entries = load_dir(&args.data, format)?;
    let mut worst_drift = 0.0_f64;
    for entry in &entries {
        let map = spec.render(&entry.ann)?;
        let count = entry.ann.count() as f64;
        if count > 0.0 {
            worst_drift = worst_drift.max((map.sum() - count).abs() / count);
        }
        let path = out_dir.join(format!("{}.density.csv", entry.stem));
        write_density_csv(&path, &map)?;
    }
    println!(
        "rendered {} density maps into {} (worst relative mass drift {:.2e})",
        entries.len(),
        out_dir.display(),
        worst_drift
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(data) = &args.data {
        cfg.paths.data = Some(data.clone());
    }
    if let Some(out) = &args.out {
        cfg.paths.out = Some(out.clone());
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(lr0) = args.lr0 {
        cfg.train.lr0 = lr0;
    }
    if let Some(batch_size) = args.batch_size {
        cfg.train.batch_size = batch_size;
    }
    if let Some(crop) = args.crop {
        cfg.train.crop = crop;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;

    let data = cfg.paths.data.clone().ok_or_else(|| {
        CliError::config("no data directory: set --data or [paths] data".to_string())
    })?;
    let out = cfg.paths.out.clone().ok_or_else(|| {
        CliError::config("no output directory: set --out or [paths] out".to_string())
    })?;

    let data = subdir_or_self(&data, "train");
    let samples = to_train_samples(load_dir(&data, AnnotationFormat::Json)?);
    cfg.echo_into(&out)?;
    let summary = train_loop(&cfg.model, &cfg.train, &cfg.loss, &cfg.label, &samples, &out)?;
    println!(
        "trained {} epochs on {} images: final train MAE {:.4}, best {:.4} at epoch {}",
        cfg.train.epochs,
        samples.len(),
        summary.final_train_mae,
        summary.best_train_mae,
        summary.best_epoch
    );
    println!("metrics:  {}", summary.metrics_path.display());
    println!("best:     {}", summary.best_checkpoint.display());
    println!("last:     {}", summary.last_checkpoint.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (model_cfg, params) = load_checkpoint(&args.checkpoint)?;
    let data = subdir_or_self(&args.data, "test");
    let samples = to_eval_samples(load_dir(&data, AnnotationFormat::Json)?);
    let bounds: Option<Vec<f64>> = match &args.levels {
        Some(text) => Some(parse_bounds(text)?),
        None => None,
    };
    let report = evaluate(&samples, &params, &model_cfg, bounds.as_deref())?;

    println!("images: {}", report.per_image.len());
    println!("mae:    {:.4}", report.mae);
    println!("mse:    {:.4}", report.mse);
    if let Some(levels) = &report.levels {
        for (name, metrics) in levels {
            println!(
                "  {:<12} n {:3}  mae {:.4}  mse {:.4}",
                name, metrics.images, metrics.mae, metrics.mse
            );
        }
    }
    if let Some(path) = &args.report {
        write_report(path, &report)?;
        println!("report: {}", path.display());
    }
    if let Some(path) = &args.scatter {
        write_scatter_csv(path, &report)?;
        println!("scatter: {}", path.display());
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let (model_cfg, params) = load_checkpoint(&args.checkpoint)?;
    let image = read_ppm(&args.image)?;
    let (count, map) = crowdcount_core::eval::predict_count(&image, &params, &model_cfg)?;
    println!("count: {:.3}", count);
    if let Some(out) = &args.out {
        write_density_csv(out, &map)?;
        println!("map:   {} ({}x{}, sum {:.3})", out.display(), map.width(), map.height(), map.sum());
    }
    Ok(())
}

fn annotation_format(text: &str) -> Result<AnnotationFormat, CliError> {
    match text {
        "json" => Ok(AnnotationFormat::Json),
        "csv" => Ok(AnnotationFormat::Csv),
        other => Err(CliError::config(format!(
            "unknown annotation format `{}`; expected json or csv",
            other
        ))),
    }
}

fn parse_bounds(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config(format!("level bound `{}` is not a number", part)))
        })
        .collect()
}

/// Shared path helper: `<dir>/train` when it exists, otherwise the
/// directory itself, so split layouts and flat layouts both work.
pub fn subdir_or_self(dir: &Path, sub: &str) -> PathBuf {
    let candidate = dir.join(sub);
    if candidate.is_dir() {
        candidate
    } else {
        dir.to_path_buf()
    }
}
