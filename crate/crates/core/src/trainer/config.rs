//! Training configuration: `key = value` text with typed overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::ViewConfig;
use crate::distill::HeadConfig;
use crate::encoder::{EncoderConfig, TrackerLayer};
use crate::error::{DoraError, Result};
use crate::transport::SinkhornConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaSchedule {
    Constant,
    /// cosine ramp from the base momentum to 1 at the last step
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub last_heads: Option<usize>,
    pub mlp_ratio: usize,
    pub tracker_layer: TrackerLayer,

    pub out_dim: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub ema_alpha: f64,
    pub ema_schedule: EmaSchedule,

    pub batch_clips: usize,
    pub frames: usize,
    pub stride: usize,
    pub objects: usize,
    pub base_crop: usize,
    pub local_views: usize,
    pub local_size: usize,

    pub sk_epsilon: f64,
    pub sk_tolerance: f64,
    pub sk_max_iter: usize,

    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            channels: 3,
            dim: 48,
            depth: 4,
            heads: 6,
            last_heads: None,
            mlp_ratio: 4,
            tracker_layer: TrackerLayer::Last,
            out_dim: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            optimizer: OptimizerKind::AdamW,
            lr: 5e-4,
            min_lr: 1e-6,
            warmup_steps: 10,
            total_steps: 100,
            weight_decay: 0.04,
            momentum: 0.9,
            ema_alpha: 0.996,
            ema_schedule: EmaSchedule::Constant,
            batch_clips: 4,
            frames: 4,
            stride: 1,
            objects: 3,
            base_crop: 64,
            local_views: 6,
            local_size: 32,
            sk_epsilon: 0.05,
            sk_tolerance: 1e-6,
            sk_max_iter: 100,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| DoraError::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "image_size" => self.image_size = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "last_heads" => self.last_heads = if v == "none" { None } else { Some(parse(key, v)?) },
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "tracker_layer" => self.tracker_layer = v.parse()?,
            "out_dim" => self.out_dim = parse(key, v)?,
            "student_temp" => self.student_temp = parse(key, v)?,
            "teacher_temp" => self.teacher_temp = parse(key, v)?,
            "center_momentum" => self.center_momentum = parse(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adamw" => OptimizerKind::AdamW,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(DoraError::Config(format!("optimizer: expected adamw or sgd, got {v:?}"))),
                }
            }
            "lr" => self.lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "ema_alpha" => self.ema_alpha = parse(key, v)?,
            "ema_schedule" => {
                self.ema_schedule = match v {
                    "constant" => EmaSchedule::Constant,
                    "cosine" => EmaSchedule::Cosine,
                    _ => return Err(DoraError::Config(format!("ema_schedule: expected constant or cosine, got {v:?}"))),
                }
            }
            "batch_clips" => self.batch_clips = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "objects" => self.objects = parse(key, v)?,
            "base_crop" => self.base_crop = parse(key, v)?,
            "local_views" => self.local_views = parse(key, v)?,
            "local_size" => self.local_size = parse(key, v)?,
            "sk_epsilon" => self.sk_epsilon = parse(key, v)?,
            "sk_tolerance" => self.sk_tolerance = parse(key, v)?,
            "sk_max_iter" => self.sk_max_iter = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(DoraError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DoraError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DoraError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, then revalidates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| DoraError::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Text form accepted by [`TrainConfig::parse`]; floats print round-trip exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("image_size", self.image_size.to_string());
        kv("patch", self.patch.to_string());
        kv("channels", self.channels.to_string());
        kv("dim", self.dim.to_string());
        kv("depth", self.depth.to_string());
        kv("heads", self.heads.to_string());
        kv("last_heads", self.last_heads.map_or("none".into(), |h| h.to_string()));
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("tracker_layer", self.tracker_layer.to_string());
        kv("out_dim", self.out_dim.to_string());
        kv("student_temp", self.student_temp.to_string());
        kv("teacher_temp", self.teacher_temp.to_string());
        kv("center_momentum", self.center_momentum.to_string());
        kv("optimizer", match self.optimizer {
            OptimizerKind::AdamW => "adamw".into(),
            OptimizerKind::Sgd => "sgd".into(),
        });
        kv("lr", self.lr.to_string());
        kv("min_lr", self.min_lr.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("momentum", self.momentum.to_string());
        kv("ema_alpha", self.ema_alpha.to_string());
        kv("ema_schedule", match self.ema_schedule {
            EmaSchedule::Constant => "constant".into(),
            EmaSchedule::Cosine => "cosine".into(),
        });
        kv("batch_clips", self.batch_clips.to_string());
        kv("frames", self.frames.to_string());
        kv("stride", self.stride.to_string());
        kv("objects", self.objects.to_string());
        kv("base_crop", self.base_crop.to_string());
        kv("local_views", self.local_views.to_string());
        kv("local_size", self.local_size.to_string());
        kv("sk_epsilon", self.sk_epsilon.to_string());
        kv("sk_tolerance", self.sk_tolerance.to_string());
        kv("sk_max_iter", self.sk_max_iter.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(DoraError::Config(m.into()));
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return err("need 0 <= min_lr <= lr");
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return err("need warmup_steps < total_steps");
        }
        if self.objects == 0 {
            return err("objects must be at least 1");
        }
        if self.batch_clips == 0 || self.frames == 0 || self.stride == 0 {
            return err("batch_clips, frames and stride must be positive");
        }
        if self.base_crop < self.image_size {
            return err("base_crop must be at least image_size");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return err("weight_decay must be nonnegative and momentum in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return err("ema_alpha must lie in [0, 1]");
        }
        self.encoder().validate()?;
        if self.objects > self.tracker_heads() {
            return Err(DoraError::Config(format!(
                "objects = {} exceeds the {} heads of the tracker block",
                self.objects,
                self.tracker_heads()
            )));
        }
        self.head().validate()?;
        self.sinkhorn().validate()?;
        self.views().validate()?;
        if self.local_size % self.patch != 0 || self.image_size % self.local_size != 0 {
            return err("local_size must be a multiple of patch and divide image_size");
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch: self.patch,
            channels: self.channels,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            last_heads: self.last_heads,
            mlp_ratio: self.mlp_ratio,
            tracker_layer: self.tracker_layer,
        }
    }

    fn tracker_heads(&self) -> usize {
        self.encoder().tracker_heads()
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            student_temp: self.student_temp,
            teacher_temp: self.teacher_temp,
            center_momentum: self.center_momentum,
            ..HeadConfig::for_encoder(self.dim, self.out_dim)
        }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig { epsilon: self.sk_epsilon, tolerance: self.sk_tolerance, max_iterations: self.sk_max_iter }
    }

    pub fn views(&self) -> ViewConfig {
        ViewConfig {
            global_size: self.image_size,
            local_size: self.local_size,
            local_count: self.local_views,
            ..ViewConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 3.3e-4;
        cfg.last_heads = Some(12);
        cfg.tracker_layer = TrackerLayer::SecondLast;
        cfg.ema_schedule = EmaSchedule::Cosine;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::parse("# tiny\n\ntotal_steps = 7  # short\nwarmup_steps = 2\nobjects=2\n").unwrap();
        assert_eq!((cfg.total_steps, cfg.objects), (7, 2));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::parse("learning_rate = 1").is_err());
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("min_lr = 1\nlr = 0.1").is_err());
        assert!(TrainConfig::parse("warmup_steps = 100\ntotal_steps = 100").is_err());
        assert!(TrainConfig::parse("objects = 0").is_err());
        assert!(TrainConfig::parse("objects = 7").is_err());
        assert!(TrainConfig::parse("lr").is_err());
    }

    #[test]
    fn overrides_are_type_checked() {
        let cfg = TrainConfig::default().with_overrides(&["total_steps=2", "warmup_steps=1"]).unwrap();
        assert_eq!(cfg.total_steps, 2);
        assert!(TrainConfig::default().with_overrides(&["total_steps=two"]).is_err());
        assert!(TrainConfig::default().with_overrides(&["bogus=1"]).is_err());
    }
}
