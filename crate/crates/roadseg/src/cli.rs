//! Command-line front end: reproducible runs driven by a TOML config with
//! flag overrides (flags mirror config keys).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, extract_patches, io, synthetic, AugmentParams};
use crate::error::{Error, Result};
use crate::inference::{
    decide_labels, ensemble_average, grid_records, predict_mask, predict_mask_sliding,
    write_submission, EnsembleSpec, SubmissionRecord,
};
use crate::models::{Model, ModelSpec, Variant};
use crate::objectives::{self, PatchGrid};
use crate::render::{render_loss_curve, render_overlay, save_probability_png16, Prediction};
use crate::training::{load_checkpoint, save_checkpoint, train, CheckpointMeta, TrainConfig, TrainHistory};

/// Environment variable overriding the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "ROADSEG_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    /// Where make-patches writes (and train reads) the patch set.
    pub patch_dir: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            image_dir: PathBuf::from("data/images"),
            mask_dir: PathBuf::from("data/masks"),
            patch_dir: PathBuf::from("data/patches"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchParams {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            patch_size: dataset::DEFAULT_PATCH_SIZE,
            stride: dataset::DEFAULT_PATCH_STRIDE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub variant: String,
    pub first_layer_channels: Option<usize>,
    #[serde(flatten)]
    pub cfg: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            variant: "unet-dilated".to_string(),
            first_layer_channels: None,
            cfg: TrainConfig::default(),
        }
    }
}

/// The declarative run configuration. Every command reads the same file;
/// command-line flags override individual keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub patches: PatchParams,
    pub augment: AugmentParams,
    pub train: TrainSection,
    pub ensemble: EnsembleSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/out"),
            data: DataPaths::default(),
            patches: PatchParams::default(),
            augment: AugmentParams::default(),
            train: TrainSection::default(),
            ensemble: EnsembleSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.train.variant.parse()
    }

    fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::for_variant(self.variant()?);
        if let Some(flc) = self.train.first_layer_channels {
            spec.first_layer_channels = flc;
        }
        spec.dropout_after_concat = self.train.cfg.dropout_after_concat;
        Ok(spec)
    }
}

#[derive(Parser, Debug)]
#[command(name = "roadseg", version, about = "Aerial road extraction toolkit")]
pub struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override: output directory (also via ROADSEG_OUTPUT_DIR).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Override: global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override: model variant (unet-32, unet-64, unet-dilated, sliding-window).
    #[arg(long, global = true)]
    pub variant: Option<String>,

    /// Override: maximum training epochs.
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,

    /// Override: batch size.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,

    /// Override: initial learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic image/mask dataset into the data directories.
    Synth(SynthArgs),
    /// Cut the raw pairs into training patches plus a manifest.
    MakePatches,
    /// Train the configured variant on the patch set.
    Train,
    /// Ensemble checkpoints over a directory of images into a submission.
    Predict(PredictArgs),
    /// Score predicted masks against ground-truth masks.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of pairs to generate.
    #[arg(long, default_value_t = 80)]
    pub count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoints to ensemble (at least one); defaults to the config's
    /// ensemble members.
    #[arg(long, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    /// Directory of input images.
    #[arg(long)]
    pub image_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    pub truth: PathBuf,
}

/// Load config, apply CLI and environment overrides.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.cfg.seed = seed;
        cfg.augment.seed = seed;
    }
    if let Some(v) = &cli.variant {
        cfg.train.variant = v.clone();
    }
    if let Some(e) = cli.max_epochs {
        cfg.train.cfg.max_epochs = e;
    }
    if let Some(b) = cli.batch_size {
        cfg.train.cfg.batch_size = b;
    }
    if let Some(lr) = cli.lr {
        cfg.train.cfg.initial_lr = lr;
    }
    Ok(cfg)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Echo the effective configuration into the output directory so every run
/// is reproducible from its artifacts alone.
fn echo_config(cfg: &RunConfig, original: Option<&Path>) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let dst = cfg.output_dir.join("config.toml");
    match original {
        Some(src) => {
            let bytes = std::fs::read(src).map_err(|e| Error::io(src, e))?;
            std::fs::write(&dst, bytes).map_err(|e| Error::io(&dst, e))?;
        }
        None => {
            let text = toml::to_string_pretty(cfg)
                .map_err(|e| Error::InvalidConfig(format!("config serialize: {e}")))?;
            std::fs::write(&dst, text).map_err(|e| Error::io(&dst, e))?;
        }
    }
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    ensure_dir(&cfg.data.image_dir)?;
    ensure_dir(&cfg.data.mask_dir)?;
    let pairs = synthetic::generate_dataset(args.count, args.size, args.size, cfg.seed);
    for pair in &pairs {
        io::save_image(
            &pair.image,
            &cfg.data.image_dir.join(format!("{}.png", pair.source_id)),
        )?;
        io::save_mask(
            &pair.mask,
            &cfg.data.mask_dir.join(format!("{}.png", pair.source_id)),
        )?;
    }
    println!(
        "wrote {} synthetic pairs of {}x{} to {}",
        pairs.len(),
        args.size,
        args.size,
        cfg.data.image_dir.display()
    );
    Ok(())
}

pub fn cmd_make_patches(cfg: &RunConfig) -> Result<()> {
    let pairs = io::load_pairs(&cfg.data.image_dir, &cfg.data.mask_dir)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no input pairs under {}",
            cfg.data.image_dir.display()
        )));
    }
    let img_out = cfg.data.patch_dir.join("images");
    let mask_out = cfg.data.patch_dir.join("masks");
    ensure_dir(&img_out)?;
    ensure_dir(&mask_out)?;

    let mut manifest = String::from("patch_id,source_id,row_offset,col_offset\n");
    let mut count = 0usize;
    for pair in &pairs {
        let patches = extract_patches(pair, cfg.patches.patch_size, cfg.patches.stride)?;
        for patch in &patches {
            io::save_image(&patch.image, &img_out.join(format!("{}.png", patch.source_id)))?;
            io::save_mask(&patch.mask, &mask_out.join(format!("{}.png", patch.source_id)))?;
            let (row, col) = patch
                .source_id
                .rsplit_once('_')
                .and_then(|(rest, col)| {
                    let (_, row) = rest.rsplit_once('_')?;
                    Some((row.to_string(), col.to_string()))
                })
                .expect("patch ids end with _row_col");
            manifest.push_str(&format!(
                "{},{},{},{}\n",
                patch.source_id,
                pair.source_id,
                row.trim_start_matches('0').parse::<usize>().unwrap_or(0),
                col.trim_start_matches('0').parse::<usize>().unwrap_or(0),
            ));
            count += 1;
        }
    }
    let manifest_path = cfg.data.patch_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    println!(
        "wrote {count} patches from {} pairs to {}",
        pairs.len(),
        cfg.data.patch_dir.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.model_spec()?;
    ensure_dir(&cfg.output_dir)?;

    let pairs = io::load_pairs(
        &cfg.data.patch_dir.join("images"),
        &cfg.data.patch_dir.join("masks"),
    )?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no patches under {}; run make-patches first",
            cfg.data.patch_dir.display()
        )));
    }
    let train_ratio = 1.0 - cfg.train.cfg.val_ratio;
    let (train_set, val_set) = dataset::split_train_val(&pairs, train_ratio, cfg.seed)?;
    println!(
        "training {} on {} patches ({} val) for up to {} epochs",
        spec.variant,
        train_set.len(),
        val_set.len(),
        cfg.train.cfg.max_epochs
    );

    let mut model = Model::build(&spec, cfg.seed)?;
    let mut history = TrainHistory::default();
    let mut train_cfg = cfg.train.cfg.clone();
    train_cfg.seed = cfg.seed;
    let report = train(
        &mut model,
        &train_set,
        &val_set,
        &train_cfg,
        &cfg.augment,
        &mut history,
    )?;
    report.best.restore(&mut model);

    let ckpt_path = cfg.output_dir.join(format!("{}.ckpt", spec.variant));
    let meta = CheckpointMeta::new(spec.clone(), report.best_epoch, Some(report.best_val_loss));
    save_checkpoint(&mut model, &meta, &ckpt_path)?;
    history.write_csv(&cfg.output_dir.join("history.csv"))?;
    render_loss_curve(&history, &cfg.output_dir.join("loss_curve.png"))?;
    println!(
        "best epoch {} (val loss {:.4}); checkpoint at {}",
        report.best_epoch,
        report.best_val_loss,
        ckpt_path.display()
    );
    Ok(())
}

/// Image number for submission ids: trailing digits of the file stem, else
/// the 1-based position in sorted order.
fn image_number(stem: &str, fallback: usize) -> u32 {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(fallback as u32)
}

pub fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> Result<()> {
    let checkpoints = if args.checkpoints.is_empty() {
        cfg.ensemble.member_checkpoints.clone()
    } else {
        args.checkpoints.clone()
    };
    if checkpoints.is_empty() {
        return Err(Error::InvalidConfig(
            "predict needs at least one checkpoint (--checkpoints or config ensemble)".into(),
        ));
    }

    // All members must load before any prediction starts.
    let mut members = Vec::new();
    for path in &checkpoints {
        let (model, meta) = load_checkpoint(path)?;
        members.push((model, meta));
    }
    let sliding_count = members
        .iter()
        .filter(|(m, _)| matches!(m, Model::Sliding(_)))
        .count();
    if sliding_count > 0 && members.len() > 1 {
        return Err(Error::InvalidConfig(
            "the sliding-window model cannot be ensembled with probability maps".into(),
        ));
    }

    ensure_dir(&cfg.output_dir)?;
    let overlay_dir = cfg.output_dir.join("overlays");
    let prob_dir = cfg.output_dir.join("probmaps");
    ensure_dir(&overlay_dir)?;
    ensure_dir(&prob_dir)?;

    let images = io::list_pngs(&args.image_dir)?;
    if images.is_empty() {
        eprintln!(
            "warning: no images under {}; writing header-only submission",
            args.image_dir.display()
        );
    }

    let spec = EnsembleSpec {
        member_checkpoints: checkpoints.clone(),
        decision_threshold: cfg.ensemble.decision_threshold,
    };
    spec.validate()?;

    let mut records: Vec<SubmissionRecord> = Vec::new();
    for (idx, path) in images.iter().enumerate() {
        let image = io::load_image(path)?;
        let stem = path
            .file_stem()
            .expect("png files have stems")
            .to_string_lossy()
            .into_owned();
        let number = image_number(&stem, idx + 1);

        let grid: PatchGrid = if sliding_count == 1 {
            let Model::Sliding(net) = &members[0].0 else {
                unreachable!()
            };
            let grid = predict_mask_sliding(net, &image)?;
            render_overlay(
                &image,
                Prediction::Grid(&grid),
                &overlay_dir.join(format!("{stem}.png")),
            )?;
            grid
        } else {
            let mut maps = Vec::new();
            for (model, _) in &members {
                let Model::Unet(net) = model else {
                    unreachable!()
                };
                maps.push(predict_mask(net, &image)?);
            }
            let mean = ensemble_average(&maps)?;
            let road = mean.road_f64();
            save_probability_png16(&road, &prob_dir.join(format!("{stem}.png")))?;
            render_overlay(
                &image,
                Prediction::Map(&road),
                &overlay_dir.join(format!("{stem}.png")),
            )?;
            decide_labels(&mean, &spec)?
        };
        records.extend(grid_records(number, &grid));
    }

    let submission_path = cfg.output_dir.join("submission.csv");
    write_submission(&records, &submission_path)?;
    println!(
        "wrote {} records for {} images to {}",
        records.len(),
        images.len(),
        submission_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    dice_loss: f64,
    iou: f64,
    f1_pixel: f64,
    f1_patch: f64,
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let pred_files = io::list_pngs(&args.pred)?;
    let truth_files = io::list_pngs(&args.truth)?;
    let names = |files: &[PathBuf]| -> Vec<String> {
        files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect()
    };
    let (pred_names, truth_names) = (names(&pred_files), names(&truth_files));
    let extras_pred: Vec<_> = pred_names
        .iter()
        .filter(|n| !truth_names.contains(n))
        .cloned()
        .collect();
    let extras_truth: Vec<_> = truth_names
        .iter()
        .filter(|n| !pred_names.contains(n))
        .cloned()
        .collect();
    if !extras_pred.is_empty() || !extras_truth.is_empty() {
        return Err(Error::InvalidInput(format!(
            "unmatched files; only in pred: [{}], only in truth: [{}]",
            extras_pred.join(", "),
            extras_truth.join(", ")
        )));
    }
    if pred_files.is_empty() {
        return Err(Error::InvalidInput("no masks to evaluate".into()));
    }

    // Report-mode dice uses eps = 0 so a perfect prediction scores exactly 0.
    let mut dice_sum = 0.0;
    let mut counts = objectives::ConfusionCounts::default();
    let mut pred_grids = Vec::new();
    let mut truth_grids = Vec::new();
    for (p, t) in pred_files.iter().zip(truth_files.iter()) {
        let pred = io::load_mask(p)?.to_f64();
        let truth = io::load_mask(t)?.to_f64();
        if pred.dim() != truth.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}: pred {:?} vs truth {:?}",
                p.display(),
                pred.dim(),
                truth.dim()
            )));
        }
        dice_sum += objectives::dice_loss_raw(&pred, &truth, 0.0);
        counts.accumulate(&objectives::confusion_counts(&pred, &truth)?);
        pred_grids.push(objectives::patch_labels(&pred)?);
        truth_grids.push(objectives::patch_labels(&truth)?);
    }
    let report = MetricsReport {
        dice_loss: dice_sum / pred_files.len() as f64,
        iou: counts.iou(),
        f1_pixel: counts.f1(),
        f1_patch: objectives::f1_patch(&pred_grids, &truth_grids)?,
    };
    println!(
        "dice_loss {:.6}\niou {:.6}\nf1_pixel {:.6}\nf1_patch {:.6}",
        report.dice_loss, report.iou, report.f1_pixel, report.f1_patch
    );
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidConfig(format!("metrics serialize: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Entry point used by the binary; returns the process exit code
/// (0 success, 1 runtime failure, 2 usage/config error).
pub fn run() -> i32 {
    let cli = Cli::parse();
    let cfg = match effective_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    // Fail fast on an unknown variant for commands that build models.
    if matches!(cli.command, Command::Train | Command::Predict(_)) {
        if let Err(e) = cfg.variant() {
            eprintln!("error: {e}");
            return 2;
        }
    }
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(&cfg, args),
        Command::MakePatches => {
            echo_config(&cfg, cli.config.as_deref()).and_then(|()| cmd_make_patches(&cfg))
        }
        Command::Train => echo_config(&cfg, cli.config.as_deref()).and_then(|()| cmd_train(&cfg)),
        Command::Predict(args) => {
            echo_config(&cfg, cli.config.as_deref()).and_then(|()| cmd_predict(&cfg, args))
        }
        Command::Evaluate(args) => cmd_evaluate(&cfg, args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.train.variant, "unet-dilated");
        assert_eq!(back.patches.patch_size, 256);
        assert_eq!(back.patches.stride, 72);
        assert_eq!(back.train.cfg.batch_size, 8);
        assert_eq!(back.train.cfg.initial_lr, 1e-4);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 9
            [train]
            variant = "unet-32"
            max_epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.variant, "unet-32");
        assert_eq!(cfg.train.cfg.max_epochs, 3);
        assert_eq!(cfg.train.cfg.plateau_patience, 5);
        assert_eq!(cfg.ensemble.decision_threshold, 0.25);
    }

    #[test]
    fn unknown_variant_is_config_error() {
        let cfg = RunConfig::from_toml("[train]\nvariant = \"resnet\"\n").unwrap();
        let err = cfg.variant().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("unet-32"), "{err}");
    }

    #[test]
    fn image_number_prefers_trailing_digits() {
        assert_eq!(image_number("test_7", 99), 7);
        assert_eq!(image_number("img042", 99), 42);
        assert_eq!(image_number("plain", 99), 99);
    }
}
