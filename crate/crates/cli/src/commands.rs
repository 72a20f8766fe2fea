//! The `train`, `eval`, `predict`, `info` and `gen` commands.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use vig_unet::checkpoint::Checkpoint;
use vig_unet::training::{
    evaluate, metrics, train_epoch, Adam, AugmentConfig, EvalReport, LrSchedule, Normalization, SegSample, TrainState,
};
use vig_unet::{Mode, ModelConfig, RngState, Tensor, VigUnet};

use crate::config::RunConfig;
use crate::dataset::{self, load_dataset, split_dataset};
use crate::error::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "checkpoint-best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoint-last.ckpt";
pub const CONFIG_COPY: &str = "run.cfg";
pub const CSV_HEADER: &str = "epoch,lr,train_loss,val_iou,val_dice";

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_dice: f64,
}

impl EpochRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.val_iou, self.val_dice
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    /// Every batch loss of every epoch, in order.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_iou: f64,
    pub output_dir: PathBuf,
}

/// Training state for `cfg`: Adam at `lr_max`, cosine decay over `epochs`.
pub fn train_state(cfg: &RunConfig, model: &VigUnet, normalization: Normalization, rng: RngState) -> Result<TrainState> {
    Ok(TrainState {
        optimizer: Adam::new(model.store(), cfg.lr_max),
        schedule: LrSchedule::new(cfg.lr_max, cfg.lr_min, cfg.epochs)?,
        normalization,
        augment: AugmentConfig {
            rotate: cfg.augment_rotate,
            flip: cfg.augment_flip,
        },
        batch_size: cfg.batch_size,
        rng,
    })
}

/// Normalization fitted on `train`, or the identity when disabled.
pub fn fit_normalization(cfg: &RunConfig, train: &[SegSample]) -> Result<Normalization> {
    if cfg.normalize {
        Ok(Normalization::fit(train.iter().map(|s| &s.image))?)
    } else {
        Ok(Normalization::identity(cfg.model.in_channels))
    }
}

/// Checkpoint holding the model and its input normalization.
pub fn checkpoint_with_norm(model: &VigUnet, norm: &Normalization) -> Checkpoint {
    let c = norm.mean.len();
    Checkpoint::from_model(model)
        .with_extra(NORM_MEAN, Tensor::from_fn(vec![c], |i| norm.mean[i]))
        .with_extra(NORM_STD, Tensor::from_fn(vec![c], |i| norm.std[i]))
}

/// Loads a checkpoint into the architecture of `config`. Shape disagreements
/// are reported with the offending tensor's name.
pub fn load_model(path: &Path, config: &ModelConfig) -> Result<(VigUnet, Normalization)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model_with(config.clone())?;
    let norm = match (ck.extra(NORM_MEAN), ck.extra(NORM_STD)) {
        (Some(m), Some(s)) if m.numel() == config.in_channels && s.numel() == config.in_channels => Normalization {
            mean: m.data().to_vec(),
            std: s.data().to_vec(),
        },
        (None, None) => Normalization::identity(config.in_channels),
        _ => {
            return Err(CliError::Dataset(format!(
                "{} has inconsistent normalization statistics",
                path.display()
            )))
        }
    };
    Ok((model, norm))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

/// Runs the full schedule on `train`, scoring `val` after every epoch.
/// `on_epoch` sees each row as it is produced.
pub fn fit(
    cfg: &RunConfig,
    train: &[SegSample],
    val: &[SegSample],
    output_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<(VigUnet, Normalization, TrainOutcome)> {
    cfg.validate()?;
    let norm = fit_normalization(cfg, train)?;
    let mut init = RngState::new(cfg.seed);
    let mut model = VigUnet::<f32>::new(cfg.model.clone(), &mut init)?;
    let mut state = train_state(cfg, &model, norm.clone(), init.fork())?;

    let mut csv = None;
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        write_file(&dir.join(CONFIG_COPY), cfg.to_text().as_bytes())?;
        let path = dir.join(METRICS_FILE);
        let mut f = std::fs::File::create(&path).map_err(CliError::io(&path))?;
        writeln!(f, "{CSV_HEADER}").map_err(CliError::io(&path))?;
        csv = Some((f, path));
    }

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut losses = Vec::new();
    let (mut best_epoch, mut best_iou) = (0, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let rep = train_epoch(&mut model, train, &mut state, epoch)?;
        let scores = evaluate(&mut model, val, &norm, cfg.batch_size)?;
        let row = EpochRow {
            epoch,
            lr: rep.lr,
            train_loss: rep.mean_loss(),
            val_iou: scores.mean_iou,
            val_dice: scores.mean_dice,
        };
        losses.extend_from_slice(&rep.batch_losses);
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", row.to_csv()).map_err(CliError::io(&*path))?;
        }
        if row.val_iou > best_iou {
            best_iou = row.val_iou;
            best_epoch = epoch;
            if let Some(dir) = output_dir {
                checkpoint_with_norm(&model, &norm).save(dir.join(BEST_CHECKPOINT))?;
            }
        }
        on_epoch(&row);
        rows.push(row);
    }
    if let Some(dir) = output_dir {
        checkpoint_with_norm(&model, &norm).save(dir.join(LAST_CHECKPOINT))?;
    }
    let outcome = TrainOutcome {
        rows,
        losses,
        best_epoch,
        best_iou,
        output_dir: output_dir.map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok((model, norm, outcome))
}

fn load_split(cfg: &RunConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let m = &cfg.model;
    let samples = load_dataset(&cfg.data_dir, m.in_channels, m.input_height, m.input_width)?;
    split_dataset(samples, cfg.split_ratio, cfg.split_seed)
}

/// Loads and splits `cfg.data_dir`, trains, and writes checkpoints, the
/// metrics CSV and a copy of the config to `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
    let (train, val) = load_split(cfg)?;
    let (_, _, outcome) = fit(cfg, &train, &val, Some(&cfg.output_dir), on_epoch)?;
    Ok(outcome)
}

/// Scores a checkpoint on the validation split, or on every sample when
/// `all` is set.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, all: bool) -> Result<EvalReport> {
    let (mut model, norm) = load_model(checkpoint, &cfg.model)?;
    let samples = if all {
        let m = &cfg.model;
        load_dataset(&cfg.data_dir, m.in_channels, m.input_height, m.input_width)?
    } else {
        load_split(cfg)?.1
    };
    Ok(evaluate(&mut model, &samples, &norm, cfg.batch_size)?)
}

/// Predicts a `{0, 255}` mask for one image, at the image's own size.
pub fn predict_mask(model: &mut VigUnet, norm: &Normalization, image: &image::DynamicImage) -> Result<GrayImage> {
    let cfg = model.config().clone();
    let x = dataset::image_tensor(image, cfg.in_channels, cfg.input_height, cfg.input_width)?;
    let x = norm.apply(&x)?;
    let x = x.reshape(vec![1, cfg.in_channels, cfg.input_height, cfg.input_width])?;
    let logits = model.predict(&x, Mode::Eval, &mut RngState::new(0))?;
    let bits = metrics::threshold_logits(logits.data());
    let small = GrayImage::from_fn(cfg.input_width as u32, cfg.input_height as u32, |x, y| {
        Luma([bits[y as usize * cfg.input_width + x as usize] * 255])
    });
    let (w, h) = (image.width(), image.height());
    if (w, h) == small.dimensions() {
        Ok(small)
    } else {
        Ok(image::imageops::resize(&small, w, h, image::imageops::FilterType::Nearest))
    }
}

/// Writes the predicted mask for `image` to `out` as 8-bit grayscale.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, image: &Path, out: &Path) -> Result<GrayImage> {
    let (mut model, norm) = load_model(checkpoint, &cfg.model)?;
    let mask = predict_mask(&mut model, &norm, &dataset::open_image(image)?)?;
    mask.save(out).map_err(CliError::image(out))?;
    Ok(mask)
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Per-module output shapes and parameter counts for `config`, plus the
/// total.
pub fn cmd_info(config: &ModelConfig) -> Result<String> {
    let model = VigUnet::<f32>::new(config.clone(), &mut RngState::new(0))?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "input {}x{}x{}, dims {:?}",
        config.in_channels,
        config.input_height,
        config.input_width,
        config.dims()
    );
    let _ = writeln!(s, "{:<22} {:>16} {:>12}", "module", "output (CxHxW)", "params");
    for row in model.module_table() {
        let [c, h, w] = row.output;
        let _ = writeln!(s, "{:<22} {:>16} {:>12}", row.name, format!("{c}x{h}x{w}"), thousands(row.params));
    }
    let total = model.count_parameters();
    let _ = writeln!(s, "total learnable parameters: {} ({:.2}M)", thousands(total), total as f64 / 1e6);
    let _ = writeln!(
        s,
        "note: the 0.7G figure sometimes quoted for this architecture is not reproduced by this layer \
         layout; the total above is the exact count of learnable values (batch-norm running statistics excluded)."
    );
    Ok(s)
}

/// Writes `n` synthetic image/mask pairs of `size x size` under `root`.
pub fn cmd_gen(root: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    dataset::generate_synthetic(root, n, size, seed)
}
