//! Anchor initialization, few-shot subsampling and the CAM training loop.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::encoder::{backward, forward, EncoderModel, ParamGradients};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{cam_batch_with, AnchorSet, CamGradients, LossBreakdown, LossComponents};
use crate::numeric::{Matrix, RngSeed, SeededRng};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};

// Independent ChaCha streams derived from the run seed.
const ANCHOR_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const SUBSAMPLE_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorInit {
    Random,
    BaseVectors,
}

impl FromStr for AnchorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(AnchorInit::Random),
            "base" | "base_vectors" | "base-vectors" => Ok(AnchorInit::BaseVectors),
            other => Err(Error::invalid(format!("unknown anchor init '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Anchor learning rate; `None` shares `lr`.
    pub anchor_lr: Option<f64>,
    /// Multiply the learning rates by `.0` every `.1` epochs.
    pub lr_decay: Option<(f64, usize)>,
    pub margin: f64,
    pub min_norm: f64,
    pub anchor_init: AnchorInit,
    pub enable_repeller: bool,
    pub enable_min_norm: bool,
    pub optimizer: OptimizerKind,
    pub seed: RngSeed,
    pub per_class_cap: Option<usize>,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            anchor_lr: None,
            lr_decay: None,
            margin: 2.0,
            min_norm: 1.0,
            anchor_init: AnchorInit::BaseVectors,
            enable_repeller: true,
            enable_min_norm: true,
            optimizer: OptimizerKind::Adam,
            seed: RngSeed(42),
            per_class_cap: None,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            repeller: self.enable_repeller,
            min_norm: self.enable_min_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be >= 1"));
        }
        if !(self.lr > 0.0) || self.anchor_lr.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::invalid("learning rates must be > 0"));
        }
        if !(self.margin > 0.0) || !(self.min_norm >= 0.0) {
            return Err(Error::invalid("margin must be > 0 and min norm >= 0"));
        }
        if self.per_class_cap == Some(0) {
            return Err(Error::invalid("per-class cap must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub attractor: f64,
    pub repeller: f64,
    pub min_norm: f64,
    pub total: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Loss columns only, for comparisons that must ignore timing.
    pub fn losses(&self) -> Vec<[f64; 4]> {
        self.epochs
            .iter()
            .map(|r| [r.attractor, r.repeller, r.min_norm, r.total])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub anchors: AnchorSet,
    pub history: TrainHistory,
}

/// Handed to a training observer after the loss of each mini-batch is computed.
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: &'a LossBreakdown,
    pub grads: &'a CamGradients,
}

/// Componentwise Gaussian anchors scaled by `max(m, p)`.
pub fn init_anchors_random(t: usize, n: usize, margin: f64, min_norm: f64, rng: &mut SeededRng) -> Result<AnchorSet> {
    let scale = margin.max(min_norm);
    let data = rng.gaussians(t * n).into_iter().map(|g| g * scale).collect();
    AnchorSet::new(Matrix::from_vec(t, n, data)?, margin, min_norm)
}

/// Anchor `j` is `s·u_j` with `s = max(√2·m, p)`: pairwise distances are
/// `s·√2 ≥ 2m` and every norm is `s ≥ p`, so both hinges start closed.
pub fn init_anchors_base_vectors(t: usize, n: usize, margin: f64, min_norm: f64) -> Result<AnchorSet> {
    if t > n {
        return Err(Error::DimensionTooSmall { classes: t, dim: n });
    }
    let s = (std::f64::consts::SQRT_2 * margin).max(min_norm);
    let mut m = Matrix::zeros(t, n);
    for j in 0..t {
        m.set(j, j, s);
    }
    AnchorSet::new(m, margin, min_norm)
}

/// Keeps at most `cap` uniformly chosen examples per class, preserving the
/// original row order.
pub fn subsample_per_class(dataset: &LabeledDataset, cap: usize, seed: RngSeed) -> Result<LabeledDataset> {
    if cap == 0 {
        return Err(Error::invalid("per-class cap must be >= 1"));
    }
    let mut rng = SeededRng::stream(seed, SUBSAMPLE_STREAM);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::new();
    for mut members in by_class {
        if members.len() > cap {
            rng.shuffle(&mut members);
            members.truncate(cap);
        }
        keep.extend(members);
    }
    keep.sort_unstable();
    Ok(dataset.select(&keep))
}

pub fn train(config: &TrainConfig, dataset: &LabeledDataset, model: EncoderModel) -> Result<TrainOutcome> {
    train_with_observer(config, dataset, model, |_| {})
}

/// [`train`], calling `observer` once per mini-batch.
pub fn train_with_observer<F>(config: &TrainConfig, dataset: &LabeledDataset, mut model: EncoderModel, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&BatchEvent<'_>),
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if dataset.input_dim() != model.input_dim() {
        return Err(Error::dims(model.input_dim(), dataset.input_dim()));
    }
    let t = dataset.num_classes();
    if let Some(&bad) = dataset.labels().iter().find(|&&y| y >= t) {
        return Err(Error::LabelOutOfRange { label: bad, classes: t });
    }
    let n = model.embedding_dim();
    let mut anchors = match config.anchor_init {
        AnchorInit::Random => {
            let mut rng = SeededRng::stream(config.seed, ANCHOR_STREAM);
            init_anchors_random(t, n, config.margin, config.min_norm, &mut rng)?
        }
        AnchorInit::BaseVectors => init_anchors_base_vectors(t, n, config.margin, config.min_norm)?,
    };

    let subsampled;
    let data = match config.per_class_cap {
        Some(cap) => {
            subsampled = subsample_per_class(dataset, cap, config.seed)?;
            &subsampled
        }
        None => dataset,
    };

    let components = config.components();
    let model_lr = LrSchedule {
        base: config.lr,
        decay: config.lr_decay,
    };
    let anchor_lr = LrSchedule {
        base: config.anchor_lr.unwrap_or(config.lr),
        decay: config.lr_decay,
    };
    let mut model_opt = Optimizer::new(config.optimizer);
    let mut anchor_opt = Optimizer::new(config.optimizer);
    let mut shuffle_rng = SeededRng::stream(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    let exec = config.exec;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;

        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let passes = exec.map_slice(idx, |&i| forward(&model, data.features().row(i)));
            let passes = passes.into_iter().collect::<Result<Vec<_>>>()?;
            let embeddings = Matrix::from_rows(&passes.iter().map(|(e, _)| e.as_slice()).collect::<Vec<_>>())?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();

            let (loss, grads) = cam_batch_with(&embeddings, &labels, &anchors, components)?;
            observer(&BatchEvent {
                epoch,
                batch: b,
                loss: &loss,
                grads: &grads,
            });

            let per_example = exec.map_indexed(passes.len(), |k| backward(&model, &passes[k].1, grads.embedding_grads.row(k)));
            let mut total = ParamGradients::zeros_like(&model);
            for g in per_example {
                total.add_assign(&g?);
            }

            model_opt.step(model.param_slices_mut(), total.slices(), model_lr.at(epoch))?;
            anchor_opt.step(
                vec![anchors.matrix_mut().as_mut_slice()],
                vec![grads.anchor_grads.as_slice()],
                anchor_lr.at(epoch),
            )?;

            sums[0] += loss.attractor;
            sums[1] += loss.repeller;
            sums[2] += loss.min_norm;
            sums[3] += loss.total;
            batches += 1;
        }

        let k = batches as f64;
        history.epochs.push(EpochRecord {
            epoch,
            attractor: sums[0] / k,
            repeller: sums[1] / k,
            min_norm: sums[2] / k,
            total: sums[3] / k,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(TrainOutcome { model, anchors, history })
}
