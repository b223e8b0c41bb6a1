//! Discriminative MLP baseline: plain cross-entropy training and
//! adversarial training that crafts fresh PGD examples against the current
//! weights every batch.

use crate::attacks::{pgd, AttackConfig, AttackObjective};
use crate::autodiff::{Param, Tape, Val};
use crate::dataset::LabeledDataset;
use crate::diffusion::{TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::nn::{AffineLayer, Init};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{compose, domains, RngStream};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    128
}

impl BaselineConfig {
    pub fn reference(dim: usize, num_classes: usize) -> Self {
        BaselineConfig {
            dim,
            num_classes,
            hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes < 2 || self.hidden == 0 {
            return Err(Error::invalid(
                "baseline_config",
                format!("{:?}", self),
            ));
        }
        Ok(())
    }
}

/// Three-layer SiLU MLP over raw features, trained with cross-entropy.
pub struct DiscriminativeModel {
    pub cfg: BaselineConfig,
    l1: AffineLayer,
    l2: AffineLayer,
    l3: AffineLayer,
}

impl DiscriminativeModel {
    pub fn new(cfg: BaselineConfig, stream: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        Ok(DiscriminativeModel {
            cfg,
            l1: AffineLayer::new("baseline.l1", cfg.hidden, cfg.dim, Init::He, stream),
            l2: AffineLayer::new("baseline.l2", cfg.hidden, cfg.hidden, Init::He, stream),
            l3: AffineLayer::new("baseline.l3", cfg.num_classes, cfg.hidden, Init::He, stream),
        })
    }

    /// Tape forward over a `(n, dim)` batch; returns `(n, num_classes)` logits.
    pub fn forward_on(&self, tape: &mut Tape<f64>, x: Val) -> Result<Val> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.dim {
            return Err(Error::shape(
                "baseline_forward",
                format!("input {:?}, expected (n, {})", shape, self.cfg.dim),
            ));
        }
        let h = self.l1.forward(tape, x)?;
        let h = tape.silu(h)?;
        let h = self.l2.forward(tape, h)?;
        let h = tape.silu(h)?;
        self.l3.forward(tape, h)
    }

    /// Host-side logits for a `(dim,)` sample or `(n, dim)` batch.
    pub fn logits(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let batched = match x.rank() {
            1 => x.reshape(vec![1, self.cfg.dim])?,
            2 => x.clone(),
            r => return Err(Error::shape("baseline_logits", format!("rank {}", r))),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(batched)?;
        let out = self.forward_on(&mut tape, xv)?;
        let logits = tape.value(out).clone();
        if x.rank() == 1 {
            logits.reshape(vec![self.cfg.num_classes])
        } else {
            Ok(logits)
        }
    }

    /// Predicted label and softmax probabilities for one sample. Ties go to
    /// the smaller label.
    pub fn predict(&self, x: &Tensor<f64>) -> Result<(usize, Vec<f64>)> {
        let logits = self.logits(x)?;
        if logits.rank() != 1 {
            return Err(Error::shape("baseline_predict", "expected one sample"));
        }
        let v = logits.to_vec();
        let mut best = 0;
        for (i, &l) in v.iter().enumerate() {
            if l > v[best] {
                best = i;
            }
        }
        Ok((best, softmax(&v)))
    }

    /// Cross-entropy at `label` and its gradient w.r.t. the input; the
    /// objective every gradient attack on this model climbs.
    pub fn ce_loss_and_input_grad(&self, x: &Tensor<f64>, label: usize) -> Result<(f64, Tensor<f64>)> {
        if x.shape() != [self.cfg.dim] {
            return Err(Error::shape(
                "baseline_input_grad",
                format!("{:?} for dim {}", x.shape(), self.cfg.dim),
            ));
        }
        if label >= self.cfg.num_classes {
            return Err(Error::invalid("baseline_input_grad", format!("label {}", label)));
        }
        let mut tape = Tape::new();
        let xv = tape.input(x.reshape(vec![1, self.cfg.dim])?)?;
        let logits = self.forward_on(&mut tape, xv)?;
        let loss = tape.cross_entropy(logits, &[label])?;
        let value = tape.value(loss).scalar_value();
        let grads = tape.backward(loss)?;
        let g = grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(vec![1, self.cfg.dim]));
        Ok((value, g.reshape(vec![self.cfg.dim])?))
    }

    /// Fraction of samples predicted correctly.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.len() == 0 {
            return Err(Error::invalid("baseline_accuracy", "empty dataset"));
        }
        let logits = self.logits(data.features())?;
        let mut hits = 0usize;
        for i in 0..data.len() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &l) in row.iter().enumerate() {
                if l > row[best] {
                    best = j;
                }
            }
            if best == data.label(i) {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn params(&self) -> Vec<&Param<f64>> {
        let mut out = Vec::new();
        out.extend(self.l1.params());
        out.extend(self.l2.params());
        out.extend(self.l3.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut out: Vec<&mut Param<f64>> = Vec::new();
        out.extend(self.l1.params_mut());
        out.extend(self.l2.params_mut());
        out.extend(self.l3.params_mut());
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.params_mut()
            .into_iter()
            .filter(|p| p.is_trainable())
            .collect()
    }

    pub fn layers(&self) -> [&AffineLayer; 3] {
        [&self.l1, &self.l2, &self.l3]
    }

    pub fn layers_mut(&mut self) -> [&mut AffineLayer; 3] {
        [&mut self.l1, &mut self.l2, &mut self.l3]
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Attack objective wrapping a discriminative model: maximize its
/// cross-entropy at the true label.
pub struct DiscriminativeObjective<'a> {
    pub model: &'a DiscriminativeModel,
}

impl AttackObjective for DiscriminativeObjective<'_> {
    fn loss_grad(&self, x: &Tensor<f64>, label: usize) -> Result<(f64, Tensor<f64>)> {
        self.model.ce_loss_and_input_grad(x, label)
    }

    fn is_adversarial(&self, x: &Tensor<f64>, label: usize) -> Result<bool> {
        Ok(self.model.predict(x)?.0 != label)
    }
}

fn check_data(model: &DiscriminativeModel, data: &LabeledDataset, what: &'static str) -> Result<()> {
    if data.dim() != model.cfg.dim {
        return Err(Error::invalid(
            what,
            format!("data dim {} vs model dim {}", data.dim(), model.cfg.dim),
        ));
    }
    if data.num_classes() > model.cfg.num_classes {
        return Err(Error::invalid(
            what,
            format!(
                "data has {} classes, model {}",
                data.num_classes(),
                model.cfg.num_classes
            ),
        ));
    }
    Ok(())
}

fn ce_step(
    model: &mut DiscriminativeModel,
    adam: &mut Adam<f64>,
    x: Tensor<f64>,
    ys: &[usize],
    what: &'static str,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let logits = model.forward_on(&mut tape, xv)?;
    let loss = tape.cross_entropy(logits, ys)?;
    let value = tape.value(loss).scalar_value();
    let grads = tape
        .backward(loss)
        .map_err(|e| e.at_stage(what, format!("step {}", step)))?;
    let mut params = model.trainable_params_mut();
    adam.step(&mut params, &grads)?;
    Ok(value)
}

/// Plain cross-entropy training on clean data.
pub fn train_discriminative(
    model: &mut DiscriminativeModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data, "train_discriminative")?;
    let n = data.len() as u64;
    let mut batch_stream = RngStream::new(seed, compose(&[domains::TRAIN, 10]));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::new();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            indices.push(batch_stream.below(n)? as usize);
        }
        let (x, ys) = data.gather(&indices)?;
        last = ce_step(model, &mut adam, x, &ys, "train_discriminative", step)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, last));
        }
    }
    Ok(TrainReport {
        loss_curve: curve,
        final_loss: last,
    })
}

/// Adversarial training: every batch is replaced by PGD examples crafted
/// against the current weights (true labels kept), then a normal
/// cross-entropy step runs on the crafted batch.
pub fn adversarial_train(
    model: &mut DiscriminativeModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    attack.validate()?;
    check_data(model, data, "adversarial_train")?;
    let n = data.len() as u64;
    let mut batch_stream = RngStream::new(seed, compose(&[domains::TRAIN, 20]));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::new();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            indices.push(batch_stream.below(n)? as usize);
        }
        let crafted: Result<Vec<Vec<f64>>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut stream =
                    RngStream::new(seed, compose(&[domains::ATTACK, step as u64, slot as u64]));
                let x = data.sample(i);
                let label = data.label(i);
                let loss_grad =
                    |p: &Tensor<f64>| model.ce_loss_and_input_grad(p, label);
                let x_adv = pgd(&loss_grad, &x, attack, &mut stream)
                    .map_err(|e| e.at_stage("adversarial_train", format!("step {}", step)))?;
                Ok(x_adv.to_vec())
            })
            .collect();
        let crafted = crafted?;
        let mut features = Vec::with_capacity(indices.len() * data.dim());
        for row in &crafted {
            features.extend_from_slice(row);
        }
        let x = Tensor::new(vec![indices.len(), data.dim()], features)?;
        let ys: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
        last = ce_step(model, &mut adam, x, &ys, "adversarial_train", step)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, last));
        }
    }
    Ok(TrainReport {
        loss_curve: curve,
        final_loss: last,
    })
}
