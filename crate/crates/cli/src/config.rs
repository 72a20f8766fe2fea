//! Run configuration: a flat `key=value` file with `#` comments.
//!
//! Model keys are those of [`ModelConfig::set`]; the rest are listed in
//! [`RunConfig::KEYS`]. Every key has a default, so an empty file is a
//! valid desk-scale configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vig_unet::ModelConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Seeds initialization, shuffling, augmentation and droppath.
    pub seed: u64,
    /// Fraction of samples held out for validation.
    pub split_ratio: f64,
    pub split_seed: u64,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub augment_rotate: bool,
    pub augment_flip: bool,
    /// Fit per-channel mean/std on the training split.
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            epochs: 200,
            batch_size: 4,
            lr_max: 1e-4,
            lr_min: 1e-5,
            seed: 0,
            split_ratio: 0.2,
            split_seed: 41,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            augment_rotate: true,
            augment_flip: true,
            normalize: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Setting(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Keys handled here rather than by the model config.
    pub const KEYS: [&'static str; 12] = [
        "epochs",
        "batch_size",
        "lr_max",
        "lr_min",
        "seed",
        "split_ratio",
        "split_seed",
        "data_dir",
        "output_dir",
        "augment_rotate",
        "augment_flip",
        "normalize",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_max" => self.lr_max = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "augment_rotate" => self.augment_rotate = parse(key, value)?,
            "augment_flip" => self.augment_flip = parse(key, value)?,
            "normalize" => self.normalize = parse(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(CliError::Setting(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(CliError::Setting(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} must lie strictly between 0 and 1", self.split_ratio));
        }
        Ok(())
    }

    /// Parses `text`; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let at = |line: usize, message: String| CliError::Config {
            path: origin.to_string(),
            line,
            message,
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(n + 1, format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| at(n + 1, strip(e)))?;
        }
        cfg.validate().map_err(|e| at(0, strip(e)))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every setting, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr_max={}", self.lr_max);
        let _ = writeln!(s, "lr_min={}", self.lr_min);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "split_ratio={}", self.split_ratio);
        let _ = writeln!(s, "split_seed={}", self.split_seed);
        let _ = writeln!(s, "data_dir={}", self.data_dir.display());
        let _ = writeln!(s, "output_dir={}", self.output_dir.display());
        let _ = writeln!(s, "augment_rotate={}", self.augment_rotate);
        let _ = writeln!(s, "augment_flip={}", self.augment_flip);
        let _ = writeln!(s, "normalize={}", self.normalize);
        s.push_str(&self.model.to_text());
        s
    }
}

/// Drops the variant prefix so line-numbered messages stay short.
fn strip(e: CliError) -> String {
    match e {
        CliError::Setting(m) => m,
        CliError::Model(vig_unet::Error::Config(m)) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("# nothing\n\n", "t").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.dims(), vec![8, 16, 32, 64, 128]);
        assert_eq!((c.split_ratio, c.split_seed, c.batch_size), (0.2, 41, 4));
    }

    #[test]
    fn keys_and_comments() {
        let text = "epochs = 3 # short\nk=5\nheads=2,2,2,4,4\ndata_dir=/tmp/x\ninput_size=32\n";
        let c = RunConfig::parse(text, "t").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.model.stages.iter().all(|s| s.k == 5));
        assert_eq!(c.model.stages[4].heads, 4);
        assert_eq!(c.data_dir, PathBuf::from("/tmp/x"));
        assert_eq!((c.model.input_height, c.model.input_width), (32, 32));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("epochs=2\n\nbogus=1\n", "run.cfg").unwrap_err();
        assert_eq!(err.to_string(), "run.cfg:3: unknown key `bogus`");
        let err = RunConfig::parse("epochs=two\n", "run.cfg").unwrap_err();
        assert!(err.to_string().starts_with("run.cfg:1:"), "{err}");
        let err = RunConfig::parse("just text\n", "run.cfg").unwrap_err();
        assert!(err.to_string().contains("expected key=value"));
        // whole-file checks report line 0
        let err = RunConfig::parse("split_ratio=1.0\n", "run.cfg").unwrap_err();
        assert!(err.to_string().starts_with("run.cfg:0:"), "{err}");
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.lr_max = 3e-4;
        c.normalize = false;
        c.model = c.model.with_reductions([2, 1, 1, 1, 1]);
        assert_eq!(RunConfig::parse(&c.to_text(), "t").unwrap(), c);
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let d = RunConfig::default().to_text();
        let keys: Vec<&str> = d.lines().filter_map(|l| l.split_once('=').map(|p| p.0)).collect();
        for k in RunConfig::KEYS {
            assert!(keys.contains(&k), "{k}");
        }
    }
}
