//! Low-rank adapter lifecycle for the denoiser: attach (freezing the base),
//! enumerate adapter parameters for the optimizer, hash the base weights to
//! prove they never moved, and merge adapters back into the base.

use crate::autodiff::Param;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::LoraAdapter;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_rank() -> usize {
    8
}

fn default_alpha() -> f64 {
    16.0
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec {
            rank: default_rank(),
            alpha: default_alpha(),
        }
    }
}

impl LoraSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("lora_spec", "rank must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("lora_spec", "alpha must be positive"));
        }
        Ok(())
    }
}

/// Attach fresh adapters to every affine layer and freeze the base model
/// (embedding table included). `A` starts as N(0, 0.01^2) and `B` as zeros,
/// so the attached model computes exactly what the base did. Errors if any
/// layer already carries an adapter or the rank does not fit a layer.
pub fn attach_lora(model: &mut Denoiser, spec: &LoraSpec, stream: &mut RngStream) -> Result<()> {
    spec.validate()?;
    for layer in model.layers() {
        if layer.adapter.is_some() {
            return Err(Error::invalid("attach_lora", "adapters already attached"));
        }
        let shape = layer.weight.shape();
        let (out_dim, in_dim) = (shape[0], shape[1]);
        if spec.rank >= out_dim.min(in_dim) {
            return Err(Error::invalid(
                "attach_lora",
                format!(
                    "rank {} does not compress a {}x{} weight",
                    spec.rank, out_dim, in_dim
                ),
            ));
        }
    }
    model.class_emb.freeze();
    for layer in model.layers_mut() {
        let shape = layer.weight.shape().to_vec();
        let (out_dim, in_dim) = (shape[0], shape[1]);
        let name = layer.weight.name().to_string();
        let a_data: Vec<f64> = (0..out_dim * spec.rank).map(|_| 0.01 * stream.normal()).collect();
        let a = Tensor::new(vec![out_dim, spec.rank], a_data)?;
        let b = Tensor::zeros(vec![spec.rank, in_dim]);
        layer.adapter = Some(LoraAdapter {
            a: Param::new(format!("{}.lora_a", name), a),
            b: Param::new(format!("{}.lora_b", name), b),
            rank: spec.rank,
            alpha: spec.alpha,
        });
        layer.weight.freeze();
        layer.bias.freeze();
    }
    Ok(())
}

pub fn has_adapters(model: &Denoiser) -> bool {
    model.layers().iter().any(|l| l.adapter.is_some())
}

/// Adapter parameters in a fixed order (layer by layer, `A` then `B`).
pub fn adapter_params(model: &Denoiser) -> Vec<&Param<f64>> {
    let mut out = Vec::new();
    for layer in model.layers() {
        if let Some(ad) = &layer.adapter {
            out.push(&ad.a);
            out.push(&ad.b);
        }
    }
    out
}

pub fn adapter_params_mut(model: &mut Denoiser) -> Vec<&mut Param<f64>> {
    let mut out: Vec<&mut Param<f64>> = Vec::new();
    for layer in model.layers_mut() {
        if let Some(ad) = &mut layer.adapter {
            out.push(&mut ad.a);
            out.push(&mut ad.b);
        }
    }
    out
}

/// Base parameters only, adapters excluded, in a fixed traversal order.
fn base_params(model: &Denoiser) -> Vec<&Param<f64>> {
    let mut out = vec![&model.class_emb];
    for layer in model.layers() {
        out.push(&layer.weight);
        out.push(&layer.bias);
    }
    out
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

/// SHA-256 over the base parameters (adapters excluded): name, shape, and
/// little-endian float bytes, in a fixed traversal order.
pub fn base_weight_hash(model: &Denoiser) -> String {
    let mut hasher = Sha256::new();
    for p in base_params(model) {
        hasher.update(p.name().as_bytes());
        hasher.update([0u8]);
        for &dim in p.value().shape() {
            hasher.update((dim as u64).to_le_bytes());
        }
        for &x in p.value().data() {
            hasher.update(x.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

/// Fold every adapter into its base weight (`W += (alpha / rank) A B`),
/// drop the adapters, and unfreeze the model. Errors when nothing is
/// attached, so a double merge cannot silently double the delta.
pub fn merge_lora(model: &mut Denoiser) -> Result<()> {
    if !has_adapters(model) {
        return Err(Error::invalid("merge_lora", "no adapters attached"));
    }
    for layer in model.layers_mut() {
        let adapter = layer
            .adapter
            .take()
            .ok_or_else(|| Error::invalid("merge_lora", "layer missing its adapter"))?;
        let merged = layer.weight.value().add(&adapter.delta()?)?;
        layer.weight.set_value(merged)?;
        layer.weight.unfreeze();
        layer.bias.unfreeze();
    }
    model.class_emb.unfreeze();
    Ok(())
}
