//! Training loop, tiled inference and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data_io::{stitch_predictions, tile_image, Sample, Tile, TileSpec};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricScope, Report};
use crate::network::{ppmamba_forward, ModelConfig, MAX_STRIDE};
use crate::params::{sgd_update, ParamStore};
use crate::tensor::Tensor;

/// Label value excluded from the loss and from the scores.
pub const IGNORE_INDEX: u8 = 255;

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_steps() -> usize {
    300
}
fn default_batch_size() -> usize {
    10
}
fn default_eval_every() -> usize {
    50
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: default_lr(), momentum: default_momentum(), weight_decay: default_weight_decay() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Evaluate on the training split every this many steps; 0 disables
    /// intermediate evaluation. The final step is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: default_steps(),
            batch_size: default_batch_size(),
            eval_every: default_eval_every(),
            seed: default_seed(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lr) && self.lr > 0.0 && ok(self.momentum) && self.momentum < 1.0 && ok(self.weight_decay)) {
            return Err(Error::Config(format!(
                "optimizer needs lr > 0, 0 <= momentum < 1, weight_decay >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Stack images and labels of `samples` into `[B, 3, H, W]` and `[B, H, W]`.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<Tensor<u8>> = samples.iter().map(|s| s.label.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&labels)?))
}

/// Logits `[B, K, H, W]` without recording gradients for the parameters.
pub fn predict_logits(store: &ParamStore<f32>, config: &ModelConfig, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let params = store.bind_frozen(&tape);
    let x = tape.constant(images.clone());
    Ok(ppmamba_forward(&tape, &params, config, &x)?.value().clone())
}

/// Class map `[H, W]` for an image `[3, H, W]` of any size, by sliding a
/// window over it and averaging overlapping logits.
pub fn infer_image(store: &ParamStore<f32>, config: &ModelConfig, image: &Tensor<f32>, tiles: &TileSpec) -> Result<Tensor<u8>> {
    if tiles.window % MAX_STRIDE != 0 {
        return Err(Error::Config(format!("tile window must be a multiple of {MAX_STRIDE}, got {}", tiles.window)));
    }
    let [_, h, w] = image.dims3()?;
    let k = config.num_classes;
    let mut out = Vec::new();
    for t in tile_image(image, tiles)? {
        let batch = t.data.reshape(&[1, 3, tiles.window, tiles.window])?;
        let logits = predict_logits(store, config, &batch)?;
        let data = logits.reshape(&[k, tiles.window, tiles.window])?;
        out.push(Tile { data, row0: t.row0, col0: t.col0 });
    }
    let stitched = stitch_predictions(&out, h, w, k)?;
    stitched.reshape(&[1, k, h, w])?.argmax_channels()?.reshape(&[h, w])
}

/// Score whole-image predictions on `samples`. With `tiles` set, every
/// image goes through [`infer_image`].
pub fn evaluate(
    store: &ParamStore<f32>,
    config: &ModelConfig,
    samples: &[Sample],
    tiles: Option<&TileSpec>,
    scope: MetricScope,
) -> Result<Report> {
    let mut cm = ConfusionMatrix::new(config.num_classes);
    for s in samples {
        let pred = match tiles {
            Some(spec) => infer_image(store, config, &s.image, spec)?,
            None => {
                let [c, h, w] = s.image.dims3()?;
                let batch = s.image.clone().reshape(&[1, c, h, w])?;
                predict_logits(store, config, &batch)?.argmax_channels()?.reshape(&[h, w])?
            }
        };
        cm.update(&pred, &s.label, IGNORE_INDEX)?;
    }
    Report::new(&cm, scope)
}

/// One step of momentum SGD on a batch; returns the mean loss.
pub fn train_step(
    store: &mut ParamStore<f32>,
    config: &ModelConfig,
    optimizer: &OptimizerConfig,
    images: &Tensor<f32>,
    labels: &Tensor<u8>,
) -> Result<f32> {
    let tape = Tape::new();
    let params = store.bind(&tape);
    let x = tape.constant(images.clone());
    let logits = ppmamba_forward(&tape, &params, config, &x)?;
    let loss = tape.cross_entropy(&logits, labels, IGNORE_INDEX)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(&loss)?;
    let named = grads.named(|n| store.get(n).map(|t| t.shape().to_vec()).unwrap_or_default());
    drop(tape);
    sgd_update(store, &named, optimizer.lr, optimizer.momentum, optimizer.weight_decay)?;
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub final_report: Report,
    pub losses: Vec<f32>,
}

/// Train from a seeded initialization. Each epoch visits the training set
/// in a fresh seeded order, and batches are consecutive runs of it.
/// Progress goes to `log` as `key=value` lines.
pub fn train(
    config: &ModelConfig,
    optimizer: &OptimizerConfig,
    schedule: &ScheduleConfig,
    samples: &[Sample],
    scope: MetricScope,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    optimizer.validate()?;
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    let io = |e: std::io::Error| Error::io("<log>", e);
    let mut store = ParamStore::<f32>::init(&config.param_specs()?, schedule.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(schedule.steps);
    writeln!(
        log,
        "event=start params={} samples={} steps={} batch_size={} lr={} momentum={} weight_decay={} seed={}",
        store.num_parameters(),
        samples.len(),
        schedule.steps,
        schedule.batch_size,
        optimizer.lr,
        optimizer.momentum,
        optimizer.weight_decay,
        schedule.seed
    )
    .map_err(io)?;
    let mut last_report = None;
    for step in 0..schedule.steps {
        let mut batch = Vec::with_capacity(schedule.batch_size);
        while batch.len() < schedule.batch_size {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let (images, labels) = collate(&batch)?;
        let loss = train_step(&mut store, config, optimizer, &images, &labels)?;
        losses.push(loss);
        writeln!(log, "step={step} loss={loss:.6}").map_err(io)?;
        let done = step + 1;
        if done == schedule.steps || (schedule.eval_every > 0 && done % schedule.eval_every == 0) {
            let report = evaluate(&store, config, samples, None, scope)?;
            writeln!(log, "step={step} split=train mf1={:.6} miou={:.6}", report.mean_f1, report.mean_iou).map_err(io)?;
            last_report = Some(report);
        }
    }
    let final_report = match last_report {
        Some(r) => r,
        None => evaluate(&store, config, samples, None, scope)?,
    };
    writeln!(log, "event=done mf1={:.6} miou={:.6}", final_report.mean_f1, final_report.mean_iou).map_err(io)?;
    Ok(TrainOutcome { store, final_report, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{synth_generate, SyntheticSpec};

    fn tiny() -> ModelConfig {
        ModelConfig { base_channels: 8, depths: vec![1, 1, 1, 1], num_classes: 4, state_dim: 4, ..Default::default() }
    }

    fn data(n: usize) -> Vec<Sample> {
        let spec = SyntheticSpec { train_samples: n, val_samples: 0, image_size: 32, num_classes: 4, ..Default::default() };
        synth_generate(&spec).unwrap()
    }

    #[test]
    fn first_loss_near_log_k() {
        let cfg = tiny();
        let samples = data(4);
        let refs: Vec<&Sample> = samples.iter().collect();
        let (x, y) = collate(&refs).unwrap();
        let mut store = ParamStore::init(&cfg.param_specs().unwrap(), 1).unwrap();
        let loss = train_step(&mut store, &cfg, &OptimizerConfig::default(), &x, &y).unwrap() as f64;
        let ln_k = (cfg.num_classes as f64).ln();
        assert!((loss - ln_k).abs() < 0.2 * ln_k, "loss {loss} vs ln K {ln_k}");
    }

    #[test]
    fn logs_are_reproducible() {
        let cfg = tiny();
        let samples = data(3);
        let sched = ScheduleConfig { steps: 3, batch_size: 2, eval_every: 2, seed: 5 };
        let run = || {
            let mut log = Vec::new();
            train(&cfg, &OptimizerConfig::default(), &sched, &samples, MetricScope::AllClasses, &mut log).unwrap();
            String::from_utf8(log).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let lines: Vec<&str> = a.lines().collect();
        assert!(lines[0].starts_with("event=start "));
        assert!(lines[1].starts_with("step=0 loss="));
        assert!(lines.iter().any(|l| l.starts_with("step=1 split=train mf1=")));
        assert!(lines.last().unwrap().starts_with("event=done "));
    }

    #[test]
    fn tiled_inference_matches_whole_image_when_window_is_image() {
        let cfg = tiny();
        let store = ParamStore::init(&cfg.param_specs().unwrap(), 2).unwrap();
        let s = &data(1)[0];
        let whole = evaluate(&store, &cfg, std::slice::from_ref(s), None, MetricScope::AllClasses).unwrap();
        let spec = TileSpec { window: 32, stride: 32, pad_value: 0.0 };
        let tiled = evaluate(&store, &cfg, std::slice::from_ref(s), Some(&spec), MetricScope::AllClasses).unwrap();
        assert_eq!(whole, tiled);
        let bad = TileSpec { window: 40, stride: 40, pad_value: 0.0 };
        assert!(matches!(infer_image(&store, &cfg, &s.image, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let cfg = tiny();
        let samples = data(1);
        let bad = OptimizerConfig { momentum: 1.0, ..Default::default() };
        let r = train(&cfg, &bad, &ScheduleConfig::default(), &samples, MetricScope::Foreground, &mut Vec::new());
        assert!(matches!(r, Err(Error::Config(_))));
        let r = train(&cfg, &OptimizerConfig::default(), &ScheduleConfig::default(), &[], MetricScope::Foreground, &mut Vec::new());
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
