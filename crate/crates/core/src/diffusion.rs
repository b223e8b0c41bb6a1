//! Forward-process training loss, base-model training, and ancestral
//! sampling for the conditional denoising diffusion model.

use crate::autodiff::{Tape, Val};
use crate::dataset::LabeledDataset;
use crate::denoiser::{Denoiser, NoisePredictor};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{compose, domains, RngStream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) || self.log_every == 0 {
            return Err(Error::invalid("train_config", format!("{:?}", self)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, batch loss)` at every `log_every` steps and at the last step.
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Per-row noising coefficients `(sqrt(ab_t), sqrt(1 - ab_t))` expanded to
/// the batch shape, plus the premixed noise term.
fn noising_tensors(
    sched: &NoiseSchedule<f64>,
    ts: &[usize],
    eps: &Tensor<f64>,
    dim: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let n = ts.len();
    if eps.shape() != [n, dim] {
        return Err(Error::shape(
            "diffusion_loss",
            format!("noise {:?} for {} rows of width {}", eps.shape(), n, dim),
        ));
    }
    let mut signal = Vec::with_capacity(n * dim);
    let mut noise = Vec::with_capacity(n * dim);
    for (r, &t) in ts.iter().enumerate() {
        if t >= sched.len() {
            return Err(Error::invalid(
                "diffusion_loss",
                format!("t = {} out of range for T = {}", t, sched.len()),
            ));
        }
        let (a, b) = sched.forward_coeffs(t);
        for &e in eps.row(r) {
            signal.push(a);
            noise.push(b * e);
        }
    }
    Ok((
        Tensor::new(vec![n, dim], signal)?,
        Tensor::new(vec![n, dim], noise)?,
    ))
}

/// Batched noise-prediction loss on the tape:
/// `mean over rows and coordinates of (eps - eps_hat)^2` where each row of
/// `x0` is noised to its own timestep. Scalar output; gradients flow to the
/// model parameters and to `x0`.
pub fn diffusion_loss_on(
    tape: &mut Tape<f64>,
    model: &Denoiser,
    sched: &NoiseSchedule<f64>,
    x0: Val,
    ts: &[usize],
    ys: &[usize],
    eps: &Tensor<f64>,
) -> Result<Val> {
    let shape = tape.value(x0).shape().to_vec();
    if shape.len() != 2 || shape[1] != model.cfg.dim || shape[0] != ts.len() {
        return Err(Error::shape(
            "diffusion_loss",
            format!("x0 {:?} for {} timesteps", shape, ts.len()),
        ));
    }
    let (n, d) = (shape[0], shape[1]);
    let (signal, noise) = noising_tensors(sched, ts, eps, d)?;
    let signal = tape.constant(signal)?;
    let noise = tape.constant(noise)?;
    let scaled = tape.mul(x0, signal)?;
    let x_t = tape.add(scaled, noise)?;
    let eps_hat = model.forward_on(tape, x_t, ts, ys)?;
    let target = tape.constant(eps.clone())?;
    let se = tape.squared_l2(eps_hat, target)?;
    tape.scale(se, 1.0 / (n * d) as f64)
}

/// Loss of a single `(x0, y, t, eps)` tuple: per-coordinate mean of the
/// squared noise-prediction error.
pub fn diffusion_loss(
    model: &Denoiser,
    sched: &NoiseSchedule<f64>,
    x0: &Tensor<f64>,
    y: usize,
    t: usize,
    eps: &Tensor<f64>,
) -> Result<f64> {
    if x0.rank() != 1 || eps.shape() != x0.shape() {
        return Err(Error::shape(
            "diffusion_loss",
            format!("x0 {:?}, eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    let d = x0.shape()[0];
    let mut tape = Tape::new();
    let x = tape.constant(x0.reshape(vec![1, d])?)?;
    let loss = diffusion_loss_on(
        &mut tape,
        model,
        sched,
        x,
        &[t],
        &[y],
        &eps.reshape(vec![1, d])?,
    )?;
    Ok(tape.value(loss).scalar_value())
}

/// Train the denoiser on clean data: uniform random timesteps, fresh noise,
/// Adam on every trainable parameter.
pub fn train_base(
    model: &mut Denoiser,
    sched: &NoiseSchedule<f64>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.dim() != model.cfg.dim {
        return Err(Error::invalid(
            "train_base",
            format!("data dim {} vs model dim {}", data.dim(), model.cfg.dim),
        ));
    }
    if data.num_classes() > model.cfg.num_classes {
        return Err(Error::invalid(
            "train_base",
            format!(
                "data has {} classes, model {}",
                data.num_classes(),
                model.cfg.num_classes
            ),
        ));
    }
    let n = data.len() as u64;
    let t_count = sched.len() as u64;
    let mut batch_stream = RngStream::new(seed, compose(&[domains::TRAIN, 0]));
    let mut t_stream = RngStream::new(seed, compose(&[domains::TRAIN, 1]));
    let mut eps_stream = RngStream::new(seed, compose(&[domains::TRAIN, 2]));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::new();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            indices.push(batch_stream.below(n)? as usize);
        }
        let (x0, ys) = data.gather(&indices)?;
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            ts.push(t_stream.below(t_count)? as usize);
        }
        let eps = eps_stream.normal_tensor(vec![cfg.batch_size, data.dim()]);
        let mut tape = Tape::new();
        let x0v = tape.constant(x0)?;
        let loss = diffusion_loss_on(&mut tape, model, sched, x0v, &ts, &ys, &eps)
            .map_err(|e| e.at_stage("train_base", format!("step {}", step)))?;
        last = tape.value(loss).scalar_value();
        let grads = tape
            .backward(loss)
            .map_err(|e| e.at_stage("train_base", format!("step {}", step)))?;
        let mut params = model.trainable_params_mut();
        adam.step(&mut params, &grads)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, last));
        }
    }
    Ok(TrainReport {
        loss_curve: curve,
        final_loss: last,
    })
}

/// Draw `n` samples of class `label` by ancestral simulation of the reverse
/// chain. The final step adds no noise, so with an exact noise oracle the
/// one-step chain inverts the forward process exactly.
pub fn ancestral_sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule<f64>,
    label: usize,
    n: usize,
    stream: &mut RngStream,
) -> Result<Tensor<f64>> {
    if label >= model.num_classes() {
        return Err(Error::invalid(
            "ancestral_sample",
            format!("label {} of {}", label, model.num_classes()),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("ancestral_sample", "n must be positive"));
    }
    let d = model.dim();
    let mut x = stream.normal_tensor(vec![n, d]);
    for t in (0..sched.len()).rev() {
        let ts = vec![t; n];
        let eps_hat = model.predict(&x, &ts, label)?;
        let alpha = sched.alpha(t);
        let beta = sched.beta(t);
        let ab = sched.alpha_bar(t);
        let k = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let mean = x.sub(&eps_hat.scale(k))?.scale(inv_sqrt_alpha);
        x = if t > 0 {
            let sigma = sched.posterior_variance(t).sqrt();
            let z = stream.normal_tensor(vec![n, d]);
            mean.add(&z.scale(sigma))?
        } else {
            mean
        };
        if !x.all_finite() {
            return Err(Error::non_finite(format!("ancestral_sample at t = {}", t)));
        }
    }
    Ok(x)
}

/// Noise predictor that knows the true class means: it inverts the forward
/// process in closed form. The ideal reference point for classifier and
/// sampler behavior.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    means: Tensor<f64>,
    sched: NoiseSchedule<f64>,
}

impl OracleDenoiser {
    pub fn new(means: Tensor<f64>, sched: NoiseSchedule<f64>) -> Result<Self> {
        if means.rank() != 2 {
            return Err(Error::shape("oracle", format!("{:?}", means.shape())));
        }
        Ok(OracleDenoiser { means, sched })
    }
}

impl NoisePredictor for OracleDenoiser {
    fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    fn num_classes(&self) -> usize {
        self.means.shape()[0]
    }

    fn predict(&self, x_t: &Tensor<f64>, ts: &[usize], label: usize) -> Result<Tensor<f64>> {
        if label >= self.num_classes() {
            return Err(Error::invalid("oracle", format!("label {}", label)));
        }
        let d = self.dim();
        if x_t.rank() != 2 || x_t.shape()[1] != d || x_t.shape()[0] != ts.len() {
            return Err(Error::shape("oracle", format!("{:?}", x_t.shape())));
        }
        let mean = self.means.row(label);
        let mut out = Vec::with_capacity(x_t.len());
        for (r, &t) in ts.iter().enumerate() {
            let (a, b) = self.sched.forward_coeffs(t);
            for (j, &x) in x_t.row(r).iter().enumerate() {
                out.push((x - a * mean[j]) / b);
            }
        }
        Tensor::new(vec![ts.len(), d], out)
    }
}
