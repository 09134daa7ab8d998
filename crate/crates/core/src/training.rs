//! Training loop. The reconstruction path never touches `A`; the mask loss trains
//! encoder, decoder and `A`; the entropy loss sees `stop_gradient(z)` and trains
//! `A`, the heads and the classifier.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    entropy_loss, gradient_loss, mask_loss, mix_graph, recon_loss, total_loss, LossTerms, LossWeights,
};
use crate::model::{save_checkpoint, Model, ModelConfig, SubspaceLayout};
use crate::rng::Rng;
use crate::synthdata::{Dataset, Part, Sprite, CHANNELS};
use crate::tensor::{Adam, AdamConfig, Graph, Real};

pub const CHECKPOINT_FILE: &str = "model.ck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub enable_isa: bool,
    pub layout: SubspaceLayout,
    /// Save an extra checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_interval: usize,
    /// Stop after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub dataset: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            enable_isa: true,
            layout: SubspaceLayout::default(),
            checkpoint_interval: 0,
            max_steps: None,
            dataset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        self.weights.validate()?;
        SubspaceLayout::for_parts(self.layout.dims())?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layout: self.layout.clone(),
            enable_isa: self.enable_isa,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_a")]
    pub recon: f64,
    #[serde(rename = "L_g")]
    pub gradient: f64,
    #[serde(rename = "L_m")]
    pub mask: f64,
    #[serde(rename = "L_e")]
    pub entropy: f64,
    pub total: f64,
}

/// Sprite indices and mask index for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub m: usize,
}

/// `batch` input indices, an independent draw of targets without replacement and
/// a uniform mask index below `parts`.
pub fn sample_pairs(dataset_len: usize, batch: usize, parts: usize, rng: &mut Rng) -> Result<Batch> {
    if dataset_len < batch {
        return Err(Error::InsufficientData(format!(
            "dataset has {dataset_len} sprites, batch needs {batch}"
        )));
    }
    let inputs = rng.sample_without_replacement(dataset_len, batch);
    let targets = rng.sample_without_replacement(dataset_len, batch);
    let m = rng.below(parts);
    Ok(Batch { inputs, targets, m })
}

/// Dense tensors for one step: images and the part-`m` masks broadcast over
/// channels, all `B×3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub inputs: Vec<T>,
    pub targets: Vec<T>,
    pub mask_in: Vec<T>,
    pub mask_t: Vec<T>,
    pub m: usize,
}

fn sprite_tensors<T: Real>(sprites: &[&Sprite], part: Part) -> (Vec<T>, Vec<T>) {
    let mut img = Vec::new();
    let mut mask = Vec::new();
    for s in sprites {
        img.extend(s.image().data.iter().map(|&v| T::of(v as f64)));
        let m = s.mask(part);
        for _ in 0..CHANNELS {
            mask.extend(m.iter().map(|&v| T::of(v as f64)));
        }
    }
    (img, mask)
}

impl<T: Real> StepInputs<T> {
    pub fn gather(dataset: &Dataset, batch: &Batch) -> Result<Self> {
        let part = *Part::ALL
            .get(batch.m)
            .ok_or_else(|| Error::Config(format!("mask index {} has no part", batch.m)))?;
        let pick = |idx: &[usize]| -> Result<Vec<&Sprite>> {
            idx.iter()
                .map(|&i| {
                    dataset
                        .sprites
                        .get(i)
                        .ok_or_else(|| Error::InsufficientData(format!("sprite index {i} out of range")))
                })
                .collect()
        };
        let (inputs, mask_in) = sprite_tensors(&pick(&batch.inputs)?, part);
        let (targets, mask_t) = sprite_tensors(&pick(&batch.targets)?, part);
        Ok(StepInputs {
            batch: batch.inputs.len(),
            height: dataset.height,
            width: dataset.width,
            inputs,
            targets,
            mask_in,
            mask_t,
            m: batch.m,
        })
    }

    fn image_shape(&self) -> [usize; 4] {
        [self.batch, CHANNELS, self.height, self.width]
    }
}

/// Builds the full objective on `g` and returns the weighted total and its terms.
pub fn composite_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: &StepInputs<T>,
    weights: &LossWeights,
) -> Result<(crate::tensor::Var, LossTerms)> {
    let b = x.batch;
    if x.targets.len() != x.inputs.len() || b < 1 {
        return Err(Error::shape("step targets", &[x.targets.len()], &[x.inputs.len()]));
    }
    let shape = x.image_shape();
    let mut both = x.inputs.clone();
    both.extend_from_slice(&x.targets);
    let images = g.constant(&[2 * b, shape[1], shape[2], shape[3]], both)?;
    let z = model.encode_graph(g, images)?;
    let d = model.layout().total();
    let z_in = g.narrow(z, 0, 0, b)?;
    let z_t = g.narrow(z, 0, b, b)?;

    // Mixing path: encoder -> A⁻¹ -> swap subspace m -> A -> decoder.
    let s_in = model.sources_graph(g, z_in)?;
    let s_t = model.sources_graph(g, z_t)?;
    let s_mix = mix_graph(g, model.layout(), s_in, s_t, x.m)?;
    let z_mix = model.latent_graph(g, s_mix)?;

    // Reconstruction decodes z_in directly; both halves share one decoder pass.
    let dec_in = g.concat(&[z_in, z_mix], 0)?;
    let decoded = model.decode_graph(g, dec_in)?;
    let i_out = g.narrow(decoded, 0, 0, b)?;
    let i_mix = g.narrow(decoded, 0, b, b)?;

    let i_in = g.narrow(images, 0, 0, b)?;
    let i_t = g.narrow(images, 0, b, b)?;
    let m_in = g.constant(&shape, x.mask_in.clone())?;
    let m_t = g.constant(&shape, x.mask_t.clone())?;

    let recon = recon_loss(g, i_in, i_out)?;
    let gradient = gradient_loss(g, i_in, i_out)?;
    let mask = mask_loss(g, i_mix, i_in, i_t, m_in, m_t)?;
    let entropy = if model.isa_enabled() {
        let frozen = g.stop_gradient(z_in);
        let s = model.sources_graph(g, frozen)?;
        Some(entropy_loss(g, model, s)?)
    } else {
        None
    };
    debug_assert_eq!(g.shape(z_in), &[b, d]);
    let terms = LossTerms {
        recon,
        gradient,
        mask,
        entropy,
    };
    let total = total_loss(g, &terms, weights)?;
    Ok((total, terms))
}

/// Model, optimizer and sampling state of a run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real = f32> {
    config: TrainConfig,
    model: Model<T>,
    optimizer: Adam<T>,
    rng: Rng,
    step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), Rng::substream(config.seed, 0).next_u64())?;
        let optimizer = Adam::new(config.adam(), model.params());
        Ok(Trainer {
            rng: Rng::substream(config.seed, 1),
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.optimizer
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn into_parts(self) -> (Model<T>, Adam<T>) {
        (self.model, self.optimizer)
    }

    /// Clears and fills parameter gradients for `x` without updating anything.
    pub fn compute_grads(&mut self, x: &StepInputs<T>) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let (total, terms) = composite_loss(&mut g, &self.model, x, &self.config.weights)?;
        self.model.params_mut().zero_grads();
        g.backward(total, self.model.params_mut())?;
        Ok(StepMetrics {
            step: self.step + 1,
            recon: g.scalar(terms.recon).f64(),
            gradient: g.scalar(terms.gradient).f64(),
            mask: g.scalar(terms.mask).f64(),
            entropy: terms.entropy.map_or(0.0, |e| g.scalar(e).f64()),
            total: g.scalar(total).f64(),
        })
    }

    /// One optimizer step on `x`. On failure the model and optimizer are left as
    /// they were before the call.
    pub fn train_step(&mut self, x: &StepInputs<T>) -> Result<StepMetrics> {
        let metrics = self.compute_grads(x)?;
        let snapshot = self.model.isa_enabled().then(|| (self.model.clone(), self.optimizer.clone()));
        self.optimizer.step(self.model.params_mut())?;
        if self.model.isa_enabled() {
            if let Err(e) = self.model.refresh_inverse() {
                let (m, o) = snapshot.expect("snapshot taken with the subspace layer on");
                self.model = m;
                self.optimizer = o;
                return Err(e);
            }
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Samples a batch from `dataset` and takes one step.
    pub fn step_on(&mut self, dataset: &Dataset) -> Result<StepMetrics> {
        let batch = sample_pairs(dataset.len(), self.config.batch_size, self.model.layout().count(), &mut self.rng)?;
        let x = StepInputs::gather(dataset, &batch)?;
        self.train_step(&x)
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real = f32> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub metrics: Vec<StepMetrics>,
    pub steps_per_epoch: usize,
}

impl<T: Real> TrainOutcome<T> {
    /// Median `L_a` of every epoch in order.
    pub fn epoch_recon_medians(&self) -> Vec<f64> {
        self.metrics
            .chunks(self.steps_per_epoch.max(1))
            .map(|c| median(c.iter().map(|m| m.recon).collect()))
            .collect()
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(config).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&cfg_path, json + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(file),
        })
    }

    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))
    }

    fn finish(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))
    }
}

/// Runs the configured number of epochs over `dataset`.
///
/// With `out`, writes `config.json`, `metrics.jsonl` and `model.ck` there (plus
/// `model_epoch<N>.ck` every `checkpoint_interval` epochs). If a step fails, the
/// last good model is saved to `model.ck` before the error is returned.
pub fn train<T: Real>(config: &TrainConfig, dataset: &Dataset, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(config.clone())?;
    let b = config.batch_size;
    if dataset.len() < b {
        return Err(Error::InsufficientData(format!(
            "dataset has {} sprites, batch needs {b}",
            dataset.len()
        )));
    }
    let steps_per_epoch = dataset.len() / b;
    let mut outputs = out.map(|d| Outputs::create(d, config)).transpose()?;
    let mut metrics = Vec::with_capacity(steps_per_epoch * config.epochs);
    let parts = trainer.model.layout().count();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        trainer.rng.shuffle(&mut order);
        for chunk in order.chunks_exact(b) {
            if metrics.len() >= max_steps {
                break 'epochs;
            }
            let batch = Batch {
                inputs: chunk.to_vec(),
                targets: trainer.rng.sample_without_replacement(dataset.len(), b),
                m: trainer.rng.below(parts),
            };
            let x = StepInputs::gather(dataset, &batch)?;
            let m = match trainer.train_step(&x) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(o) = outputs.as_mut() {
                        o.finish()?;
                        save_checkpoint(&trainer.model, Some(&trainer.optimizer), &o.dir.join(CHECKPOINT_FILE))?;
                        log::error!("step {} failed; last good checkpoint saved to {}", trainer.step + 1, o.dir.display());
                    }
                    return Err(e);
                }
            };
            if let Some(o) = outputs.as_mut() {
                o.log(&m)?;
            }
            metrics.push(m);
        }
        let done = &metrics[metrics.len().saturating_sub(steps_per_epoch)..];
        log::info!(
            "epoch {}/{}: median L_a {:.5}, L_m {:.5}, L_e {:.4}",
            epoch + 1,
            config.epochs,
            median(done.iter().map(|m| m.recon).collect()),
            median(done.iter().map(|m| m.mask).collect()),
            median(done.iter().map(|m| m.entropy).collect()),
        );
        if let Some(o) = outputs.as_ref() {
            if config.checkpoint_interval > 0 && (epoch + 1) % config.checkpoint_interval == 0 {
                let path = o.dir.join(format!("model_epoch{}.ck", epoch + 1));
                save_checkpoint(&trainer.model, Some(&trainer.optimizer), &path)?;
            }
        }
    }
    if let Some(o) = outputs.as_mut() {
        o.finish()?;
        save_checkpoint(&trainer.model, Some(&trainer.optimizer), &o.dir.join(CHECKPOINT_FILE))?;
    }
    let (model, optimizer) = trainer.into_parts();
    Ok(TrainOutcome {
        model,
        optimizer,
        metrics,
        steps_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GenParams};

    fn data(n: usize) -> Dataset {
        generate(&GenParams {
            seed: 2,
            count: n,
            ..GenParams::default()
        })
        .unwrap()
    }

    fn small(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            layout: SubspaceLayout::new(&[16, 16]).unwrap(),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "weights": {"lambda1": 1.0}}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.weights.lambda1, 1.0);
        assert_eq!(parsed.weights.lambda2, 1.0);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn sample_pairs_contract() {
        let mut rng = Rng::new(0);
        let b = sample_pairs(8, 8, 5, &mut rng).unwrap();
        let mut t = b.targets.clone();
        t.sort();
        assert_eq!(t, (0..8).collect::<Vec<_>>());
        for _ in 0..1000 {
            assert!(sample_pairs(20, 4, 5, &mut rng).unwrap().m < 5);
        }
        assert!(matches!(sample_pairs(3, 4, 5, &mut rng), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let ds = data(8);
        let mut t = Trainer::<f32>::new(TrainConfig {
            weights: LossWeights::new(0.0, 0.0, 0.0, 0.0),
            ..small(1)
        })
        .unwrap();
        let before = t.model().params().clone();
        t.step_on(&ds).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id).data(), t.model().params().get(id).data(), "{}", before.name(id));
        }
    }

    #[test]
    fn few_steps_are_deterministic_and_finite() {
        let ds = data(16);
        let cfg = TrainConfig {
            max_steps: Some(3),
            ..small(5)
        };
        let a = train::<f32>(&cfg, &ds, None).unwrap();
        let b = train::<f32>(&cfg, &ds, None).unwrap();
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.iter().all(|m| m.total.is_finite() && m.recon >= 0.0 && m.entropy > 0.0));
    }

    #[test]
    fn no_isa_logs_zero_entropy() {
        let ds = data(8);
        let cfg = TrainConfig {
            enable_isa: false,
            max_steps: Some(1),
            ..small(5)
        };
        let out = train::<f32>(&cfg, &ds, None).unwrap();
        let m = out.metrics[0];
        assert_eq!(m.entropy, 0.0);
        assert!((m.total - (2.0 * m.recon + m.gradient + m.mask)).abs() < 1e-6);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }
}
