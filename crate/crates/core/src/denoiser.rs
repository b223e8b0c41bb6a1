//! Class-conditional noise prediction network.
//!
//! A three-layer SiLU MLP sees the noisy sample, a sinusoidal timestep
//! embedding, and a learned class embedding, and predicts the noise that was
//! mixed in. The output layer starts at zero so the initial prediction is
//! identically zero regardless of conditioning.

use crate::autodiff::{Param, Tape, Val};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, time_embedding, AffineLayer, Init};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_time_emb_dim")]
    pub time_emb_dim: usize,
    #[serde(default = "default_class_emb_dim")]
    pub class_emb_dim: usize,
}

fn default_hidden() -> usize {
    128
}

fn default_time_emb_dim() -> usize {
    32
}

fn default_class_emb_dim() -> usize {
    16
}

impl DenoiserConfig {
    pub fn reference(dim: usize, num_classes: usize) -> Self {
        DenoiserConfig {
            dim,
            num_classes,
            hidden: default_hidden(),
            time_emb_dim: default_time_emb_dim(),
            class_emb_dim: default_class_emb_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes < 2 || self.hidden == 0 || self.class_emb_dim == 0 {
            return Err(Error::invalid("denoiser_config", format!("{:?}", self)));
        }
        if self.time_emb_dim < 2 || self.time_emb_dim % 2 != 0 {
            return Err(Error::invalid(
                "denoiser_config",
                "time_emb_dim must be even and >= 2",
            ));
        }
        Ok(())
    }
}

/// Anything that predicts the noise component of a noisy batch given one
/// conditioning label. Test oracles implement this alongside the real model.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `x_t` is `(n, dim)`, `ts` gives the timestep per row, all rows share
    /// `label`. Returns the predicted noise, `(n, dim)`.
    fn predict(&self, x_t: &Tensor<f64>, ts: &[usize], label: usize) -> Result<Tensor<f64>>;
}

#[derive(Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub class_emb: Param<f64>,
    pub l1: AffineLayer,
    pub l2: AffineLayer,
    pub l3: AffineLayer,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, stream: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let in_dim = cfg.dim + cfg.time_emb_dim + cfg.class_emb_dim;
        Ok(Denoiser {
            cfg,
            class_emb: Param::new(
                "denoiser.class_emb",
                init_tensor(
                    vec![cfg.num_classes, cfg.class_emb_dim],
                    Init::Normal(0.1),
                    cfg.class_emb_dim,
                    stream,
                ),
            ),
            l1: AffineLayer::new("denoiser.l1", cfg.hidden, in_dim, Init::He, stream),
            l2: AffineLayer::new("denoiser.l2", cfg.hidden, cfg.hidden, Init::He, stream),
            l3: AffineLayer::new("denoiser.l3", cfg.dim, cfg.hidden, Init::Zero, stream),
        })
    }

    /// Tape forward over a batch. `x` must be `(n, dim)` on the tape; `ts`
    /// and `ys` give the per-row timestep and label.
    pub fn forward_on(
        &self,
        tape: &mut Tape<f64>,
        x: Val,
        ts: &[usize],
        ys: &[usize],
    ) -> Result<Val> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.dim {
            return Err(Error::shape(
                "denoiser_forward",
                format!("input {:?}, expected (n, {})", shape, self.cfg.dim),
            ));
        }
        let n = shape[0];
        if ts.len() != n || ys.len() != n {
            return Err(Error::shape(
                "denoiser_forward",
                format!("{} rows, {} timesteps, {} labels", n, ts.len(), ys.len()),
            ));
        }
        let mut temb = Vec::with_capacity(n * self.cfg.time_emb_dim);
        for &t in ts {
            temb.extend(time_embedding(t, self.cfg.time_emb_dim)?);
        }
        let temb = tape.constant(Tensor::new(vec![n, self.cfg.time_emb_dim], temb)?)?;
        let table = tape.leaf(&self.class_emb)?;
        let cemb = tape.embed(table, ys)?;
        let h = tape.concat_last(&[x, temb, cemb])?;
        let h = self.l1.forward(tape, h)?;
        let h = tape.silu(h)?;
        let h = self.l2.forward(tape, h)?;
        let h = tape.silu(h)?;
        self.l3.forward(tape, h)
    }

    /// Inference on a scratch tape; same forward path as training.
    pub fn predict_eps(&self, x_t: &Tensor<f64>, ts: &[usize], ys: &[usize]) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone())?;
        let out = self.forward_on(&mut tape, x, ts, ys)?;
        Ok(tape.value(out).clone())
    }

    pub fn params(&self) -> Vec<&Param<f64>> {
        let mut out = vec![&self.class_emb];
        out.extend(self.l1.params());
        out.extend(self.l2.params());
        out.extend(self.l3.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut out: Vec<&mut Param<f64>> = vec![&mut self.class_emb];
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

    pub fn num_scalar_params(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }
}

impl NoisePredictor for Denoiser {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn predict(&self, x_t: &Tensor<f64>, ts: &[usize], label: usize) -> Result<Tensor<f64>> {
        if label >= self.cfg.num_classes {
            return Err(Error::invalid(
                "denoiser_predict",
                format!("label {} of {}", label, self.cfg.num_classes),
            ));
        }
        let ys = vec![label; ts.len()];
        self.predict_eps(x_t, ts, &ys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{fd_grad, max_rel_err};

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            dim: 3,
            num_classes: 2,
            hidden: 8,
            time_emb_dim: 4,
            class_emb_dim: 2,
        }
    }

    #[test]
    fn initial_prediction_is_exactly_zero() {
        let mut stream = RngStream::new(1, 1);
        let model = Denoiser::new(DenoiserConfig::reference(16, 4), &mut stream).unwrap();
        let x = Tensor::new(vec![2, 16], vec![0.3; 32]).unwrap();
        let out = model.predict(&x, &[0, 99], 1).unwrap();
        assert_eq!(out.shape(), &[2, 16]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn construction_is_deterministic_in_the_stream() {
        let a = Denoiser::new(small_cfg(), &mut RngStream::new(5, 2)).unwrap();
        let b = Denoiser::new(small_cfg(), &mut RngStream::new(5, 2)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value(), pb.value());
        }
        let c = Denoiser::new(small_cfg(), &mut RngStream::new(6, 2)).unwrap();
        assert_ne!(a.l1.weight.value(), c.l1.weight.value());
    }

    #[test]
    fn prediction_depends_on_label_and_timestep_after_nudging_l3() {
        let mut stream = RngStream::new(7, 1);
        let mut model = Denoiser::new(small_cfg(), &mut stream).unwrap();
        let w = init_tensor(vec![3, 8], Init::He, 8, &mut stream);
        model.l3.weight.set_value(w).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        let a = model.predict(&x, &[5], 0).unwrap();
        let b = model.predict(&x, &[5], 1).unwrap();
        let c = model.predict(&x, &[50], 0).unwrap();
        assert_ne!(a.to_vec(), b.to_vec());
        assert_ne!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn rejects_mismatched_batch_metadata() {
        let mut stream = RngStream::new(8, 1);
        let model = Denoiser::new(small_cfg(), &mut stream).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(model.predict_eps(&x, &[1], &[0, 0]).is_err());
        assert!(model.predict_eps(&x, &[1, 2], &[0]).is_err());
        assert!(model.predict(&x, &[1, 2], 9).is_err());
        let bad = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(model.predict(&bad, &[1, 2], 0).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Scalar loss: squared distance between prediction and a fixed
        // target, checked against central differences through every layer.
        let mut stream = RngStream::new(9, 1);
        let mut model = Denoiser::new(small_cfg(), &mut stream).unwrap();
        let w = init_tensor(vec![3, 8], Init::He, 8, &mut stream);
        model.l3.weight.set_value(w).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.4, -0.1, 0.2, -0.3, 0.5, 0.0]).unwrap();
        let target = Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap();
        let ts = [3usize, 7];
        let ys = [0usize, 1];

        let loss_of = |m: &Denoiser| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let pred = m.forward_on(&mut tape, xv, &ts, &ys).unwrap();
            let tv = tape.constant(target.clone()).unwrap();
            let l = tape.squared_l2(pred, tv).unwrap();
            tape.value(l).scalar_value()
        };

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let pred = model.forward_on(&mut tape, xv, &ts, &ys).unwrap();
        let tv = tape.constant(target.clone()).unwrap();
        let loss = tape.squared_l2(pred, tv).unwrap();
        let grads = tape.backward(loss).unwrap();

        let n_params = model.params().len();
        for pi in 0..n_params {
            let analytic = grads
                .wrt_param(model.params()[pi])
                .expect("trainable param gradient")
                .to_vec();
            let n = analytic.len();
            let numeric = fd_grad(
                |i, delta| {
                    let mut v = model.params()[pi].value().clone();
                    v.data_mut()[i] += delta;
                    let old = model.params()[pi].value().clone();
                    model.params_mut()[pi].set_value(v).unwrap();
                    let l = loss_of(&model);
                    model.params_mut()[pi].set_value(old).unwrap();
                    Ok(l)
                },
                n,
                1e-6,
            )
            .unwrap();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-7, "param {} err {}", pi, err);
        }
    }
}
