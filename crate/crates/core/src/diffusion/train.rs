use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ema_update_store, hybrid_loss_graph, DiffusionSchedule, LossInputs, DEFAULT_EMA_DECAY, DEFAULT_LABEL_DROP};
use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Lmdf, Rng, Tensor};
use crate::unet::{Model, LATENT_CHANNELS};

/// Latents `[K, h, w, 4]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub latents: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(latents: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 4 || s[3] != LATENT_CHANNELS || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(
                "dataset",
                format!(
                    "latents {s:?} with {} labels; need [K,h,w,{LATENT_CHANNELS}] and K labels",
                    labels.len()
                ),
            ));
        }
        Ok(Self { latents, labels })
    }

    /// Standard normal latents; labels cycle through `0..num_classes`.
    pub fn synthetic(k: usize, h: usize, w: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let latents = Rng::new(seed).normal(&[k, h, w, LATENT_CHANNELS]);
        Self::new(latents, (0..k).map(|i| i % num_classes.max(1)).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.latents.shape()[1], self.latents.shape()[2])
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let items = idx.iter().map(|&i| self.latents.index_outer(i)).collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&items)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn to_lmdf(&self) -> Lmdf {
        let mut file = Lmdf::new();
        file.push("latents", &self.latents.cast::<f32>());
        let labels: Vec<f64> = self.labels.iter().map(|&l| l as f64).collect();
        file.push("labels", &Tensor::<f32>::from_f64(&[labels.len()], &labels).expect("1-D"));
        file
    }

    pub fn from_lmdf(file: &Lmdf) -> Result<Self> {
        let latents = file.tensor::<T>("latents")?;
        let raw = file.tensor::<f64>("labels")?;
        let labels = raw
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("label {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(latents, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_lmdf().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_lmdf(&Lmdf::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub label_drop: f64,
    pub ema_decay: f64,
    pub vlb_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-4,
            label_drop: DEFAULT_LABEL_DROP,
            ema_decay: DEFAULT_EMA_DECAY,
            vlb_weight: 1.0,
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,l_simple,l_vlb,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.l_simple, self.l_vlb, self.total)
    }
}

/// AdamW on the hybrid loss with an EMA copy of the weights.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub ema: ParamStore<T>,
    pub schedule: DiffusionSchedule,
    pub config: TrainConfig,
    opt: AdamW<T>,
    rng: Rng,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, schedule: DiffusionSchedule, config: TrainConfig, seed: u64) -> Self {
        let opt = AdamW::new(
            &model.params,
            AdamWConfig {
                lr: config.lr,
                ..AdamWConfig::default()
            },
        );
        Self {
            ema: model.params.clone(),
            model,
            schedule,
            config,
            opt,
            rng: Rng::new(seed),
            step: 0,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn fail(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(op) => Error::Training {
                step: self.step,
                detail: format!("non-finite value in {op}"),
            },
            Error::Training { detail, .. } => Error::Training { step: self.step, detail },
            other => other,
        }
    }

    /// Draws a batch (all items when the set is no larger than the batch
    /// size), its timesteps, noise and label drops, and takes one step.
    pub fn step(&mut self, data: &Dataset<T>) -> Result<LossRecord> {
        let idx: Vec<usize> = if self.config.batch_size >= data.len() {
            (0..data.len()).collect()
        } else {
            (0..self.config.batch_size).map(|_| self.rng.below(data.len())).collect()
        };
        let (z0, labels) = data.batch(&idx)?;
        let null = self.model.null_label();
        let inputs = LossInputs::draw(&z0, &labels, &self.schedule, self.config.label_drop, null, &mut self.rng);
        self.step_on(&inputs)
    }

    /// One optimizer step on fully specified inputs.
    pub fn step_on(&mut self, inputs: &LossInputs<T>) -> Result<LossRecord> {
        let record = self.apply(inputs).map_err(|e| self.fail(e))?;
        self.step += 1;
        Ok(record)
    }

    fn apply(&mut self, inputs: &LossInputs<T>) -> Result<LossRecord> {
        let mut g = Graph::new();
        let vars = hybrid_loss_graph(&self.model, &mut g, inputs, &self.schedule, self.config.vlb_weight)?;
        let get = |v| g.value(v).data()[0].to_f64_lossy();
        let record = LossRecord {
            step: self.step,
            l_simple: get(vars.l_simple),
            l_vlb: get(vars.l_vlb),
            total: get(vars.total),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite("hybrid_loss"));
        }
        let grads = g.backward(vars.total)?.params(&g, &self.model.params);
        self.opt.step(&mut self.model.params, &grads)?;
        ema_update_store(&mut self.ema, &self.model.params, self.config.ema_decay)?;
        Ok(record)
    }
}
