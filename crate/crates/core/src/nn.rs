//! Affine layers with optional low-rank adapters, parameter initialization,
//! and the sinusoidal timestep embedding.

use crate::autodiff::{Param, Tape, Val};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Low-rank additive delta for one affine layer's weight:
/// `W_eff = W + (alpha / rank) * A B` with `A (out, rank)`, `B (rank, in)`.
/// `A` starts as a small Gaussian and `B` as zeros, so a fresh adapter is an
/// exact no-op.
#[derive(Debug)]
pub struct LoraAdapter {
    pub a: Param<f64>,
    pub b: Param<f64>,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Host-side `(alpha / rank) * A B`, shape `(out, in)`.
    pub fn delta(&self) -> Result<Tensor<f64>> {
        Ok(self.a.value().matmul(self.b.value())?.scale(self.scaling()))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Gaussian with std `sqrt(2 / in_dim)`.
    He,
    /// All zeros (final layers that must start as the identity of residuals).
    Zero,
    /// Gaussian with the given std.
    Normal(f64),
}

pub fn init_tensor(shape: Vec<usize>, init: Init, fan_in: usize, stream: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zero => vec![0.0; n],
        Init::He => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| std * stream.normal()).collect()
        }
        Init::Normal(std) => (0..n).map(|_| std * stream.normal()).collect(),
    };
    Tensor::new(shape, data).expect("shape/product consistent")
}

/// `y = x W^T + b` with an optional low-rank adapter on the weight.
#[derive(Debug)]
pub struct AffineLayer {
    pub weight: Param<f64>,
    pub bias: Param<f64>,
    pub adapter: Option<LoraAdapter>,
}

impl AffineLayer {
    /// Bias always starts at zero.
    pub fn new(name: &str, out_dim: usize, in_dim: usize, init: Init, stream: &mut RngStream) -> Self {
        AffineLayer {
            weight: Param::new(
                format!("{}.weight", name),
                init_tensor(vec![out_dim, in_dim], init, in_dim, stream),
            ),
            bias: Param::new(format!("{}.bias", name), Tensor::zeros(vec![out_dim])),
            adapter: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<f64>, x: Val) -> Result<Val> {
        let w = tape.leaf(&self.weight)?;
        let b = tape.leaf(&self.bias)?;
        let base = tape.affine(x, w, b)?;
        let Some(ad) = &self.adapter else {
            return Ok(base);
        };
        let down_w = tape.leaf(&ad.b)?;
        let up_w = tape.leaf(&ad.a)?;
        let down = tape.linear(x, down_w)?;
        let up = tape.linear(down, up_w)?;
        let delta = tape.scale(up, ad.scaling())?;
        tape.add(base, delta)
    }

    /// Weight the layer would have after merging its adapter.
    pub fn effective_weight(&self) -> Result<Tensor<f64>> {
        match &self.adapter {
            None => Ok(self.weight.value().clone()),
            Some(ad) => self.weight.value().add(&ad.delta()?),
        }
    }

    pub fn params(&self) -> Vec<&Param<f64>> {
        let mut out = vec![&self.weight, &self.bias];
        if let Some(ad) = &self.adapter {
            out.push(&ad.a);
            out.push(&ad.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut out: Vec<&mut Param<f64>> = vec![&mut self.weight, &mut self.bias];
        if let Some(ad) = &mut self.adapter {
            out.push(&mut ad.a);
            out.push(&mut ad.b);
        }
        out
    }
}

/// Sinusoidal embedding of an integer timestep: `dim/2` sine and `dim/2`
/// cosine features over log-spaced frequencies from 1 down to 1/10000.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::invalid(
            "time_embedding",
            format!("dim {} must be even and >= 2", dim),
        ));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / denom).exp();
        out.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / denom).exp();
        out.push((t as f64 * freq).cos());
    }
    Ok(out)
}
