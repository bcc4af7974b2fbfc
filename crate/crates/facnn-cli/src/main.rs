//! Command line surface for feature-aligned CNNs: training, evaluation,
//! attribution heatmaps, bounded-increment audits and pixel-removal
//! curves.
//!
//! Exit codes: 0 success (and audit PASS), 1 audit FAIL, 2 usage or IO
//! error. Every output directory receives exactly one `manifest.json`
//! capturing the resolved configuration, seed, checkpoint hash and tool
//! version; re-running with the same inputs reproduces every CSV and PPM
//! byte for byte (timestamps excluded).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use facnn::data::{load_cifar10, load_mnist, AugmentConfig, Dataset};
use facnn::export::{write_curves_csv, write_heatmap_ppm, write_map_csv};
use facnn::interpret::{
    audit_bounded_increment, fa_attribution, gradcam_oracle, pearson, rescale_stack,
};
use facnn::model::{FaModel, HeadKind, ModelConfig};
use facnn::saliency::{pixel_removal_curve, KOccSpec, RiseSpec, SaliencySource};
use facnn::tensor::Tensor;
use facnn::train::{evaluate, train, TrainConfig};
use facnn::{FaError, SkipKind};

#[derive(Parser)]
#[command(name = "facnn", version, about = "Feature-aligned CNN trainer and explainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and persist the best-validation checkpoint
    Train(TrainArgs),
    /// Report top-1 validation accuracy of a checkpoint
    Eval(EvalArgs),
    /// Emit per-layer, per-class attribution heatmaps for one image
    Attribute(AttributeArgs),
    /// Audit the bounded-increment property of the rescaled stack
    Audit(AuditArgs),
    /// Run the pixel-removal faithfulness benchmark
    Removal(RemovalArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory with dataset files; defaults to $FA_DATA_DIR
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Dataset layout: mnist (IDX files) or cifar10 (binary batches)
    #[arg(long, default_value = "mnist")]
    dataset: String,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, Dataset), FaError> {
        let dir = match &self.data_dir {
            Some(d) => d.clone(),
            None => std::env::var_os("FA_DATA_DIR")
                .map(PathBuf::from)
                .ok_or_else(|| FaError::Config("no --data-dir and FA_DATA_DIR unset".into()))?,
        };
        match self.dataset.as_str() {
            "mnist" => load_mnist(&dir),
            "cifar10" => load_cifar10(&dir),
            other => Err(FaError::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 40)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    input_channels: usize,
    /// Input resolution as HxW, e.g. 28x28
    #[arg(long, default_value = "28x28")]
    input_size: String,
    /// Comma-separated layer indices followed by a 2x2 max pool
    #[arg(long, default_value = "4")]
    pool_after: String,
    #[arg(long, default_value = "pooling")]
    head: String,
    #[arg(long, default_value = "dampened")]
    skip: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn to_config(&self) -> Result<ModelConfig, FaError> {
        let (h, w) = parse_size(&self.input_size)?;
        let cfg = ModelConfig {
            num_layers: self.layers,
            channels: self.channels,
            num_classes: self.classes,
            input_channels: self.input_channels,
            input_height: h,
            input_width: w,
            pool_after: parse_usize_list(&self.pool_after)?,
            head: match self.head.as_str() {
                "pooling" => HeadKind::Pooling,
                "linear" => HeadKind::Linear,
                other => return Err(FaError::Config(format!("unknown head '{other}'"))),
            },
            skip: match self.skip.as_str() {
                "dampened" => SkipKind::Dampened,
                "vanilla" => SkipKind::Vanilla,
                other => return Err(FaError::Config(format!("unknown skip '{other}'"))),
            },
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f32,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f32,
    /// Steps between validation evals (0 = each epoch end)
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Validation subset used for intermediate evals
    #[arg(long)]
    eval_subset: Option<usize>,
    /// Cap the train split (bounded-time runs)
    #[arg(long)]
    train_subset: Option<usize>,
    /// Random crop padding + horizontal flip augmentation
    #[arg(long, default_value_t = false)]
    augment: bool,
    /// Stop as soon as a validation eval reaches this accuracy
    #[arg(long)]
    stop_at_val: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Index into the validation split
    #[arg(long)]
    image_index: usize,
    /// "all" or a comma-separated class list
    #[arg(long, default_value = "all")]
    classes: String,
    /// "all", a range like 1..24, or a comma-separated list
    #[arg(long, default_value = "all")]
    layers: String,
    /// Also emit the gradient-CAM oracle maps and print correlations
    #[arg(long, default_value_t = false)]
    with_oracle: bool,
    /// Integer upscale factor for the PPM heatmaps
    #[arg(long, default_value_t = 8)]
    ppm_scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Audit a trained checkpoint
    #[arg(long, conflicts_with = "random_config")]
    checkpoint: Option<PathBuf>,
    /// Audit a freshly initialized model instead
    #[arg(long, default_value_t = false)]
    random_config: bool,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of random input images
    #[arg(long, default_value_t = 20)]
    inputs: usize,
    /// Target layer for the rescaled stack (default: deepest)
    #[arg(long)]
    target_layer: Option<usize>,
}

#[derive(Args)]
struct RemovalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated subset of fa,gradcam,rise,kocc,random
    #[arg(long, default_value = "fa,gradcam,rise,kocc,random")]
    methods: String,
    /// Comma-separated fractions in [0,1]; must start at 0
    #[arg(long, default_value = "default")]
    fractions: String,
    /// Validation images to evaluate
    #[arg(long, default_value_t = 500)]
    subset: usize,
    /// Feature layer for fa/gradcam (default: deepest)
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    rise_masks: usize,
    #[arg(long, default_value_t = 7)]
    rise_grid: usize,
    #[arg(long, default_value_t = 0.5)]
    rise_keep: f32,
    #[arg(long)]
    kocc_patch: Option<usize>,
    #[arg(long)]
    kocc_stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------

fn parse_size(s: &str) -> Result<(usize, usize), FaError> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| FaError::Config(format!("bad size '{s}', expected HxW")))?;
    Ok((
        h.parse().map_err(|_| FaError::Config(format!("bad height in '{s}'")))?,
        w.parse().map_err(|_| FaError::Config(format!("bad width in '{s}'")))?,
    ))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, FaError> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| FaError::Config(format!("bad integer '{p}'")))
        })
        .collect()
}

fn parse_layers(s: &str, num_layers: usize) -> Result<Vec<usize>, FaError> {
    let s = s.trim();
    if s == "all" {
        return Ok((1..=num_layers).collect());
    }
    if let Some((a, b)) = s.split_once("..") {
        let lo: usize = a.parse().map_err(|_| FaError::Config(format!("bad range '{s}'")))?;
        let hi: usize = b.parse().map_err(|_| FaError::Config(format!("bad range '{s}'")))?;
        if lo == 0 || hi < lo {
            return Err(FaError::Config(format!("bad layer range '{s}'")));
        }
        return Ok((lo..=hi).collect());
    }
    parse_usize_list(s)
}

fn parse_fractions(s: &str) -> Result<Vec<f64>, FaError> {
    if s == "default" {
        // 0, 5, ..., 100 percent
        return Ok((0..=20).map(|i| i as f64 * 0.05).collect());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| FaError::Config(format!("bad fraction '{p}'")))
        })
        .collect()
}

fn sha256_file(path: &Path) -> Result<String, FaError> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    seed: u64,
    checkpoint_sha256: Option<String>,
    tool_version: String,
    created_unix: u64,
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    config: serde_json::Value,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(), FaError> {
    let manifest = RunManifest {
        subcommand: subcommand.into(),
        config,
        seed,
        checkpoint_sha256: match checkpoint {
            Some(p) => Some(sha256_file(p)?),
            None => None,
        },
        tool_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FaError::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(out.join("manifest.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<ExitCode, FaError> {
    let cfg = args.model.to_config()?;
    let (mut train_ds, val_ds) = args.data.load()?;
    if let Some(n) = args.train_subset {
        train_ds = train_ds.subset(n)?;
    }
    std::fs::create_dir_all(&args.out)?;
    let checkpoint = args.out.join("checkpoint.facn");
    let mut model = FaModel::new(cfg.clone())?;
    let tc = TrainConfig {
        lr: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        seed: cfg.seed,
        eval_every: args.eval_every,
        eval_subset: args.eval_subset,
        augment: args.augment.then_some(AugmentConfig { random_crop_pad: 4, hflip_prob: 0.5 }),
        checkpoint_path: Some(checkpoint.clone()),
        log_path: Some(args.out.join("train_log.csv")),
        stop_at_val: args.stop_at_val,
    };
    let report = train(&mut model, &train_ds, &val_ds, &tc)?;
    for (i, e) in report.per_epoch.iter().enumerate() {
        println!("epoch {i}: train_loss {:.6} val_top1 {:.4}", e.train_loss, e.val_top1);
    }
    println!("best val_top1 {:.4} over {} steps", report.best_val, report.steps);
    if !checkpoint.exists() {
        model.save_checkpoint(&checkpoint)?;
    }
    write_manifest(
        &args.out,
        "train",
        serde_json::json!({
            "model": cfg,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "epochs": args.epochs,
            "momentum": args.momentum,
            "weight_decay": args.weight_decay,
            "augment": args.augment,
            "train_subset": args.train_subset,
            "dataset": args.data.dataset,
        }),
        cfg.seed,
        Some(&checkpoint),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, FaError> {
    let model = FaModel::load_checkpoint(&args.checkpoint)?;
    let (_, mut val) = args.data.load()?;
    if let Some(n) = args.subset {
        val = val.subset(n)?;
    }
    let top1 = evaluate(&model, &val)?;
    println!("val_top1 {:.6} over {} images", top1, val.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_attribute(args: AttributeArgs) -> Result<ExitCode, FaError> {
    let model = FaModel::load_checkpoint(&args.checkpoint)?;
    let (_, val) = args.data.load()?;
    if args.image_index >= val.len() {
        return Err(FaError::Bounds(format!(
            "--image-index {} outside validation split of {}",
            args.image_index,
            val.len()
        )));
    }
    let classes: Vec<usize> = if args.classes == "all" {
        (0..model.config.num_classes).collect()
    } else {
        parse_usize_list(&args.classes)?
    };
    if let Some(&c) = classes.iter().find(|&&c| c >= model.config.num_classes) {
        return Err(FaError::Bounds(format!("class {c} outside 0..{}", model.config.num_classes)));
    }
    let layers = parse_layers(&args.layers, model.config.num_layers)?;
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > model.config.num_layers) {
        return Err(FaError::Bounds(format!("layer {l} outside 1..={}", model.config.num_layers)));
    }
    if classes.is_empty() || layers.is_empty() {
        return Err(FaError::Config("empty class or layer selection".into()));
    }

    let image = val.normalized_image(args.image_index)?;
    let (_, features) = model.forward(&image, true)?;
    let features = features.expect("capture requested");
    let ownership = model.config.channel_ownership();

    std::fs::create_dir_all(&args.out)?;
    for &layer in &layers {
        for &class in &classes {
            let fa = fa_attribution(&features, 0, layer, class, &ownership)?;
            let stem = format!("layer{layer:02}_class{class}");
            write_heatmap_ppm(&fa, &args.out.join(format!("{stem}.ppm")), args.ppm_scale)?;
            write_map_csv(&fa, &args.out.join(format!("{stem}.csv")))?;
            if args.with_oracle {
                let oracle = gradcam_oracle(&model, &image, class, layer)?;
                write_heatmap_ppm(
                    &oracle,
                    &args.out.join(format!("{stem}_oracle.ppm")),
                    args.ppm_scale,
                )?;
                write_map_csv(&oracle, &args.out.join(format!("{stem}_oracle.csv")))?;
                let r = pearson(&fa.values, &oracle.values);
                println!("layer {layer} class {class} correlation {r:.6}");
            }
        }
    }
    write_manifest(
        &args.out,
        "attribute",
        serde_json::json!({
            "image_index": args.image_index,
            "classes": classes,
            "layers": layers,
            "with_oracle": args.with_oracle,
            "ppm_scale": args.ppm_scale,
            "model": model.config,
            "dataset": args.data.dataset,
        }),
        model.config.seed,
        Some(&args.checkpoint),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(args: AuditArgs) -> Result<ExitCode, FaError> {
    if args.inputs == 0 {
        return Err(FaError::Config("--inputs must be at least 1".into()));
    }
    let model = match (&args.checkpoint, args.random_config) {
        (Some(path), _) => FaModel::load_checkpoint(path)?,
        (None, true) => FaModel::new(args.model.to_config()?)?,
        (None, false) => {
            return Err(FaError::Config("need --checkpoint or --random-config".into()))
        }
    };
    let cfg = &model.config;
    let target = args.target_layer.unwrap_or(cfg.num_layers);
    let images = Tensor::rand_uniform_seeded(
        &[args.inputs, cfg.input_channels, cfg.input_height, cfg.input_width],
        0.0,
        1.0,
        cfg.seed ^ 0xa0d1,
    );
    let (_, features) = model.forward(&images, true)?;
    let stack = rescale_stack(&features.expect("captured"), target)?;
    let report = audit_bounded_increment(&stack);
    println!(
        "audit over {} inputs, {} layers, target {target}: {report}",
        args.inputs, cfg.num_layers
    );
    for (i, step) in report.per_layer_steps.iter().enumerate() {
        println!("  step {:>2} -> {:>2}: {step:.8}", i, i + 1);
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_removal(args: RemovalArgs) -> Result<ExitCode, FaError> {
    let model = FaModel::load_checkpoint(&args.checkpoint)?;
    let (_, val) = args.data.load()?;
    let ds = val.subset(args.subset)?;
    let fractions = parse_fractions(&args.fractions)?;
    let layer = args.layer.unwrap_or(model.config.num_layers);
    if layer == 0 || layer > model.config.num_layers {
        return Err(FaError::Bounds(format!(
            "layer {layer} outside 1..={}",
            model.config.num_layers
        )));
    }
    let (_, h, w) = ds.dims();
    let kocc_default = KOccSpec::for_image_side(h.min(w));
    let kocc = KOccSpec {
        patch: args.kocc_patch.unwrap_or(kocc_default.patch),
        stride: args.kocc_stride.unwrap_or(kocc_default.stride),
        occlusion_value: 0.0,
    };
    let rise = RiseSpec {
        num_masks: args.rise_masks,
        grid: args.rise_grid,
        keep_prob: args.rise_keep,
        bilinear: true,
    };

    let mut sources = Vec::new();
    for name in args.methods.split(',') {
        let tag = facnn::interpret::MethodTag::parse(name)?;
        sources.push(match tag {
            facnn::interpret::MethodTag::FaAverage => SaliencySource::FaAverage { layer },
            facnn::interpret::MethodTag::GradCam => SaliencySource::GradCam { layer },
            facnn::interpret::MethodTag::Rise => {
                SaliencySource::Rise { spec: rise, seed: args.seed }
            }
            facnn::interpret::MethodTag::KOcc => SaliencySource::KOcc { spec: kocc },
            facnn::interpret::MethodTag::Random => SaliencySource::Random { seed: args.seed },
        });
    }
    if sources.is_empty() {
        return Err(FaError::Config("no methods selected".into()));
    }

    std::fs::create_dir_all(&args.out)?;
    let mut curves = Vec::new();
    for source in &sources {
        let curve = pixel_removal_curve(&model, &ds, source, &fractions)?;
        println!(
            "{}: baseline {:.4}, final {:.4}",
            curve.method,
            curve.points.first().map(|p| p.1).unwrap_or(0.0),
            curve.points.last().map(|p| p.1).unwrap_or(0.0),
        );
        write_curves_csv(
            std::slice::from_ref(&curve),
            &args.out.join(format!("curve_{}.csv", curve.method)),
        )?;
        curves.push(curve);
    }
    write_curves_csv(&curves, &args.out.join("curves.csv"))?;
    write_manifest(
        &args.out,
        "removal",
        serde_json::json!({
            "methods": args.methods,
            "fractions": fractions,
            "subset": args.subset,
            "layer": layer,
            "rise": { "num_masks": rise.num_masks, "grid": rise.grid, "keep_prob": rise.keep_prob },
            "kocc": { "patch": kocc.patch, "stride": kocc.stride },
            "model": model.config,
            "dataset": args.data.dataset,
        }),
        args.seed,
        Some(&args.checkpoint),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Attribute(a) => cmd_attribute(a),
        Cmd::Audit(a) => cmd_audit(a),
        Cmd::Removal(a) => cmd_removal(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
