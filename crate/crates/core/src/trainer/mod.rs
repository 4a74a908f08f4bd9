//! Training loop, optimizer, checkpoints and metrics.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod step;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{EmaSchedule, OptimizerKind, TrainConfig};
pub use optim::{lr_schedule, optimizer_step, OptimizerState};
pub use step::{sample_batch, train_on_batch, train_step, ClipViews, Dataset, StepMetrics, METRICS_HEADER};

use crate::distill::ModelParams;
use crate::error::{DoraError, Result};
use checkpoint::{bytes_tensor, tensor_bytes, tensor_u64, u64_tensor, Tensor};

/// Independent seed for a named random stream (`"data"`, `"heads"`, …).
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a of the stream name, then a splitmix64 finalizer
    let tag = stream.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut z = seed ^ tag.rotate_left(17) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// completed steps
    pub step: u64,
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub center: Vec<f32>,
    pub optimizer: OptimizerState,
}

impl TrainState {
    /// Fresh student from the `"init"` stream; the teacher starts as a copy.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", 0));
        let student = ModelParams::<f32>::init(&cfg.encoder(), &cfg.head(), &mut rng)?;
        Ok(Self {
            step: 0,
            teacher: student.clone(),
            optimizer: OptimizerState::new(&student),
            center: vec![0.0; cfg.out_dim],
            student,
        })
    }

    fn tensors(&self, cfg: &TrainConfig) -> Vec<Tensor> {
        let mut out = vec![
            bytes_tensor("meta.config", cfg.to_text().as_bytes()),
            u64_tensor("meta.step", self.step),
            u64_tensor("meta.optimizer_steps", self.optimizer.steps),
            Tensor::new("center", vec![self.center.len()], self.center.clone()),
        ];
        for (prefix, params) in [
            ("student.", &self.student),
            ("teacher.", &self.teacher),
            ("optimizer.first.", &self.optimizer.first),
            ("optimizer.second.", &self.optimizer.second),
        ] {
            params.visit(&mut |name, m| {
                out.push(Tensor::new(format!("{prefix}{name}"), vec![m.rows(), m.cols()], m.as_slice().to_vec()))
            });
        }
        out
    }
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    checkpoint::write(path, &state.tensors(cfg))
}

/// Reads a checkpoint back into its configuration and state.
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let tensors = checkpoint::read(path)?;
    let corrupt = |reason: String| DoraError::Corrupt { path: path.to_path_buf(), reason };
    let mut by_name: HashMap<&str, &Tensor> = HashMap::new();
    for t in &tensors {
        if by_name.insert(&t.name, t).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", t.name)));
        }
    }
    let get = |name: &str| by_name.get(name).copied().ok_or_else(|| corrupt(format!("missing tensor {name}")));
    let text = String::from_utf8(tensor_bytes(get("meta.config")?, path)?)
        .map_err(|_| corrupt("config echo is not UTF-8".into()))?;
    let cfg = TrainConfig::parse(&text).map_err(|e| corrupt(format!("config echo: {e}")))?;
    let mut state = TrainState::init(&cfg)?;
    state.step = tensor_u64(get("meta.step")?, path)?;
    state.optimizer.steps = tensor_u64(get("meta.optimizer_steps")?, path)?;
    let center = get("center")?;
    if center.data.len() != cfg.out_dim {
        return Err(corrupt("center has the wrong length".into()));
    }
    state.center = center.data.clone();
    let mut missing = None;
    for (prefix, params) in [
        ("student.", &mut state.student),
        ("teacher.", &mut state.teacher),
        ("optimizer.first.", &mut state.optimizer.first),
        ("optimizer.second.", &mut state.optimizer.second),
    ] {
        params.visit_mut(&mut |name, m| {
            let full = format!("{prefix}{name}");
            match by_name.get(full.as_str()) {
                Some(t) if t.dims == [m.rows(), m.cols()] => m.as_mut_slice().copy_from_slice(&t.data),
                _ => missing = missing.take().or(Some(full)),
            }
        });
    }
    if let Some(name) = missing {
        return Err(corrupt(format!("tensor {name} is missing or has the wrong shape")));
    }
    Ok((cfg, state))
}

/// Runs until `total_steps` (or `stop_at`, if earlier), appending to `out/metrics.csv` and writing
/// `out/checkpoint.dora` every `checkpoint_every` steps and at the end.
pub fn run(
    cfg: &TrainConfig,
    state: &mut TrainState,
    data: &Dataset,
    out: &Path,
    stop_at: Option<u64>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    fs::create_dir_all(out).map_err(|e| DoraError::io(out, e))?;
    let metrics_path = out.join("metrics.csv");
    let fresh = !metrics_path.exists();
    let mut csv = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| DoraError::io(&metrics_path, e))?;
    if fresh {
        writeln!(csv, "{METRICS_HEADER}").map_err(|e| DoraError::io(&metrics_path, e))?;
    }
    let ckpt = out.join("checkpoint.dora");
    let mut rows = Vec::new();
    let end = stop_at.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    while state.step < end {
        let m = train_step(cfg, state, data)?;
        writeln!(csv, "{}", m.csv_row()).map_err(|e| DoraError::io(&metrics_path, e))?;
        on_step(&m);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            save_checkpoint(&ckpt, cfg, state)?;
        }
        rows.push(m);
    }
    save_checkpoint(&ckpt, cfg, state)?;
    Ok(rows)
}
