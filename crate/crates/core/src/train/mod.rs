//! Loss functions, the two training stages and checkpointing.

mod checkpoint;
pub mod loss;
mod stages;

use std::path::Path;

use ndarray::{Array, ArrayBase, Data, Dimension};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataprep::{rng_from_seed, AugmentConfig, RngState};
use crate::error::{invalid, Error, Result};
use crate::nn::{build_network, Adam, AdamConfig, NetworkGraph, NetworkKind, Params, WidthScale};
use crate::{Scalar, Window};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{
    adversarial_losses, generator_objective, split_suv_loss, weighted_l2_loss, AdversarialLosses, SplitParts,
};
pub use stages::{discriminator_accuracy, DiscriminatorAccuracy, fit_cgan, fit_fcn, synthesize, train_cgan, train_fcn};

/// Reconstruction term used by a training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    /// Target-weighted squared error over all voxels.
    Weighted,
    /// The weighted loss normalized separately over low and high SUV voxels.
    SplitSuv,
    L2,
}

impl ReconLoss {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReconLoss::Weighted => "weighted",
            ReconLoss::SplitSuv => "split_suv",
            ReconLoss::L2 => "l2",
        }
    }

    pub fn value<T, S1, S2, D>(&self, pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>, threshold: f64) -> Result<f64>
    where
        T: Scalar,
        S1: Data<Elem = T>,
        S2: Data<Elem = T>,
        D: Dimension,
    {
        match self {
            ReconLoss::Weighted => loss::weighted_l2_loss(pred, target),
            ReconLoss::SplitSuv => loss::split_suv_loss(pred, target, threshold),
            ReconLoss::L2 => loss::l2_loss(pred, target),
        }
    }

    pub fn grad<T, S1, S2, D>(&self, pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>, threshold: f64) -> Result<Array<T, D>>
    where
        T: Scalar,
        S1: Data<Elem = T>,
        S2: Data<Elem = T>,
        D: Dimension,
    {
        match self {
            ReconLoss::Weighted => loss::weighted_l2_grad(pred, target),
            ReconLoss::SplitSuv => loss::split_suv_grad(pred, target, threshold),
            ReconLoss::L2 => loss::l2_grad(pred, target),
        }
    }
}

impl std::str::FromStr for ReconLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(ReconLoss::Weighted),
            "split_suv" => Ok(ReconLoss::SplitSuv),
            "l2" => Ok(ReconLoss::L2),
            _ => Err(invalid(format!("unknown loss {s:?} (expected weighted, split_suv or l2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lambda: f64,
    /// High/low SUV boundary in SUV units.
    pub suv_threshold: f64,
    pub suv_window: Window,
    pub max_steps: u64,
    pub seed: u64,
    pub width_scale: WidthScale,
    /// `(height, width)` of the training slices.
    pub input_size: (usize, usize),
    pub fcn_kind: NetworkKind,
    pub generator_kind: NetworkKind,
    pub fcn_loss: ReconLoss,
    pub cgan_loss: ReconLoss,
    pub augment: bool,
    pub augment_config: AugmentConfig,
    /// Also update the FCN from the generator objective during the cGAN stage.
    pub joint_finetune: bool,
    /// Validation loss is evaluated every `eval_every` steps when a
    /// validation set is supplied.
    pub eval_every: u64,
    /// Stop after this many evaluations without improvement.
    pub early_stopping_patience: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lambda: 20.0,
            suv_threshold: 2.5,
            suv_window: Window::SUV,
            max_steps: 1000,
            seed: 0,
            width_scale: WidthScale::new(1, 1),
            input_size: (512, 512),
            fcn_kind: NetworkKind::Fcn4s,
            generator_kind: NetworkKind::UNetGen,
            fcn_loss: ReconLoss::Weighted,
            cgan_loss: ReconLoss::SplitSuv,
            augment: true,
            augment_config: AugmentConfig::default(),
            joint_finetune: false,
            eval_every: 50,
            early_stopping_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be at least 1"));
        }
        if *self.width_scale.numer() == 0 {
            return Err(invalid("width scale must be positive"));
        }
        self.augment_config.validate()
    }

    /// The SUV threshold expressed in normalized units.
    pub fn threshold_normalized(&self) -> f64 {
        self.suv_window.to_normalized(self.suv_threshold)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fcn,
    Cgan,
}

/// A graph with its parameters and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub graph: NetworkGraph,
    pub params: Params<T>,
    pub adam: Adam<T>,
}

impl<T: Scalar> Network<T> {
    pub fn init(graph: NetworkGraph, cfg: AdamConfig, rng: &mut RngState) -> Result<Self> {
        let params = Params::init(&graph, rng)?;
        let adam = Adam::new(&graph, cfg)?;
        Ok(Network { graph, params, adam })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

/// Epoch-wise shuffled sample order plus the random stream feeding it,
/// augmentation and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl Sampler {
    pub fn new(rng: RngState) -> Self {
        Sampler { rng, order: Vec::new(), cursor: 0 }
    }

    pub fn next_batch(&mut self, n_items: usize, batch: usize) -> Result<Vec<usize>> {
        if n_items == 0 {
            return Err(invalid("training set is empty"));
        }
        if !self.order.is_empty() && self.order.len() != n_items {
            return Err(invalid(format!(
                "training set has {n_items} items but the saved sample order covers {}",
                self.order.len()
            )));
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor >= self.order.len() {
                self.order = (0..n_items).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub best: Option<f64>,
    pub stale: u32,
    pub stopped: bool,
}

/// Everything needed to continue a training stage exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub stage: Stage,
    pub config: TrainConfig,
    /// The FCN in the first stage, the generator in the second.
    pub model: Network<T>,
    pub discriminator: Option<Network<T>>,
    /// Fine-tuned FCN copy, present only with `joint_finetune`.
    pub fcn: Option<Network<T>>,
    pub step: u64,
    pub history: Vec<LossRecord>,
    pub sampler: Sampler,
    pub early_stopping: EarlyStopping,
}

impl<T: Scalar> TrainState<T> {
    /// Freshly initialized FCN stage state.
    pub fn new_fcn(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let graph = build_network(config.fcn_kind, 1, config.input_size, config.width_scale)?;
        let model = Network::init(graph, config.adam(), &mut rng)?;
        Ok(TrainState {
            stage: Stage::Fcn,
            config: config.clone(),
            model,
            discriminator: None,
            fcn: None,
            step: 0,
            history: Vec::new(),
            sampler: Sampler::new(rng),
            early_stopping: EarlyStopping::default(),
        })
    }

    /// Freshly initialized cGAN stage state conditioned on a trained FCN.
    pub fn new_cgan(config: &TrainConfig, fcn_state: &TrainState<T>) -> Result<Self> {
        config.validate()?;
        if fcn_state.stage != Stage::Fcn {
            return Err(invalid("the cGAN stage must start from an FCN-stage state"));
        }
        let fcn_graph = &fcn_state.model.graph;
        if fcn_graph.input_size != config.input_size {
            return Err(Error::ShapeMismatch(format!(
                "FCN trained at {:?}, cGAN configured for {:?}",
                fcn_graph.input_size, config.input_size
            )));
        }
        let mut rng = rng_from_seed(config.seed);
        let gen = build_network(config.generator_kind, 2, config.input_size, config.width_scale)?;
        let disc = build_network(NetworkKind::Discriminator, 3, config.input_size, config.width_scale)?;
        let model = Network::init(gen, config.adam(), &mut rng)?;
        let discriminator = Network::init(disc, config.adam(), &mut rng)?;
        let fcn = config.joint_finetune.then(|| Network {
            graph: fcn_graph.clone(),
            params: fcn_state.model.params.clone(),
            adam: Adam::new(fcn_graph, config.adam()).expect("graph already validated"),
        });
        Ok(TrainState {
            stage: Stage::Cgan,
            config: config.clone(),
            model,
            discriminator: Some(discriminator),
            fcn,
            step: 0,
            history: Vec::new(),
            sampler: Sampler::new(rng),
            early_stopping: EarlyStopping::default(),
        })
    }

    pub(crate) fn record(&mut self, name: &str, value: f64) {
        self.history.push(LossRecord { step: self.step, name: name.to_string(), value });
    }

    /// Values of one named series in step order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.history.iter().filter(|r| r.name == name).map(|r| r.value).collect()
    }
}

/// Writes the loss history as `step,loss_name,value` rows.
pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(["step", "loss_name", "value"]).map_err(csv_err)?;
    for r in history {
        w.write_record([r.step.to_string(), r.name.clone(), r.value.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => invalid(format!("{other:?}")),
    }
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = Sampler::new(rng_from_seed(3));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(10, 4).unwrap()).collect();
        seen.truncate(10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(s.next_batch(9, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        assert!((ok.threshold_normalized() - 0.125).abs() < 1e-15);
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { lambda: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn moving_average() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
