//! Adapter-only fine-tuning that drives the denoiser's conditional loss at
//! the true label down on adversarial inputs, plus checkpoint selection by
//! validation robust accuracy.
//!
//! The base model stays frozen throughout; its weight hash is recorded
//! before the run and asserted after, so the only thing that can move is
//! the adapters.

use crate::checkpoint::{load_denoiser, save_denoiser};
use crate::classifier::{evaluate, EvalConfig};
use crate::dataset::LabeledDataset;
use crate::denoiser::Denoiser;
use crate::diffusion::diffusion_loss_on;
use crate::error::{Error, Result};
use crate::lora::{base_weight_hash, has_adapters, LoraSpec};
use crate::optim::{Adam, AdamConfig, WarmupConstant};
use crate::rng::{compose, domains, RngStream};
use crate::schedule::NoiseSchedule;
use crate::autodiff::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Noise/timestep pairs drawn per sample in every batch.
    #[serde(default = "default_timesteps_per_sample")]
    pub timesteps_per_sample: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Linear warmup steps before the learning rate goes flat.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// A checkpoint lands every this many steps (plus one at step 0).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub lora: LoraSpec,
}

fn default_steps() -> usize {
    3000
}

fn default_batch() -> usize {
    8
}

fn default_timesteps_per_sample() -> usize {
    8
}

fn default_lr() -> f64 {
    1e-4
}

fn default_warmup() -> usize {
    100
}

fn default_checkpoint_every() -> usize {
    100
}

impl Default for TmConfig {
    fn default() -> Self {
        TmConfig {
            steps: default_steps(),
            batch_size: default_batch(),
            timesteps_per_sample: default_timesteps_per_sample(),
            lr: default_lr(),
            warmup: default_warmup(),
            weight_decay: 0.0,
            checkpoint_every: default_checkpoint_every(),
            lora: LoraSpec::default(),
        }
    }
}

impl TmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0
            || self.batch_size == 0
            || self.timesteps_per_sample == 0
            || self.checkpoint_every == 0
        {
            return Err(Error::invalid(
                "tm_config",
                "steps, batch_size, timesteps_per_sample, checkpoint_every must be positive",
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("tm_config", "lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("tm_config", "weight_decay must be nonnegative"));
        }
        self.lora.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TmReport {
    /// `(step, batch loss)` at every checkpoint step and the final step.
    pub loss_curve: Vec<(usize, f64)>,
    /// Checkpoints written, `(steps completed, path)`, step 0 included.
    pub checkpoints: Vec<(usize, PathBuf)>,
    /// Base weight hash, identical before and after the run.
    pub base_hash: String,
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{}.tmdc", step))
}

/// Fine-tune the adapters on adversarial inputs labeled with their true
/// classes. The model must already carry adapters; everything else is
/// frozen and verified unchanged by hash.
pub fn tm_finetune(
    model: &mut Denoiser,
    sched: &NoiseSchedule<f64>,
    adv_data: &LabeledDataset,
    cfg: &TmConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<TmReport> {
    cfg.validate()?;
    if !has_adapters(model) {
        return Err(Error::invalid("tm_finetune", "attach adapters before fine-tuning"));
    }
    if adv_data.dim() != model.cfg.dim {
        return Err(Error::invalid(
            "tm_finetune",
            format!("data dim {} vs model dim {}", adv_data.dim(), model.cfg.dim),
        ));
    }
    if adv_data.num_classes() > model.cfg.num_classes {
        return Err(Error::invalid(
            "tm_finetune",
            format!(
                "data has {} classes, model {}",
                adv_data.num_classes(),
                model.cfg.num_classes
            ),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let hash_before = base_weight_hash(model);
    let mut checkpoints = Vec::new();
    let start = checkpoint_path(out_dir, 0);
    save_denoiser(model, &start)?;
    checkpoints.push((0, start));

    let n = adv_data.len() as u64;
    let t_count = sched.len() as u64;
    let rows = cfg.batch_size * cfg.timesteps_per_sample;
    let d = adv_data.dim();
    let mut batch_stream = RngStream::new(seed, compose(&[domains::FINETUNE, 0]));
    let mut t_stream = RngStream::new(seed, compose(&[domains::FINETUNE, 1]));
    let mut eps_stream = RngStream::new(seed, compose(&[domains::FINETUNE, 2]));
    let schedule = WarmupConstant {
        base_lr: cfg.lr,
        warmup: cfg.warmup as u64,
    };
    let mut adam = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::with_lr(cfg.lr)
    });
    let mut curve = Vec::new();
    let mut last;
    for step in 0..cfg.steps {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            indices.push(batch_stream.below(n)? as usize);
        }
        let mut features = Vec::with_capacity(rows * d);
        let mut ys = Vec::with_capacity(rows);
        for &i in &indices {
            let row = adv_data.features().row(i);
            for _ in 0..cfg.timesteps_per_sample {
                features.extend_from_slice(row);
                ys.push(adv_data.label(i));
            }
        }
        let mut ts = Vec::with_capacity(rows);
        for _ in 0..rows {
            ts.push(t_stream.below(t_count)? as usize);
        }
        let eps = eps_stream.normal_tensor(vec![rows, d]);
        let mut tape = Tape::new();
        let x0 = tape.constant(Tensor::new(vec![rows, d], features)?)?;
        let loss = diffusion_loss_on(&mut tape, model, sched, x0, &ts, &ys, &eps)
            .map_err(|e| e.at_stage("tm_finetune", format!("step {}", step)))?;
        last = tape.value(loss).scalar_value();
        let grads = tape
            .backward(loss)
            .map_err(|e| e.at_stage("tm_finetune", format!("step {}", step)))?;
        adam.set_lr(schedule.lr_at(step as u64));
        let mut params = model.trainable_params_mut();
        adam.step(&mut params, &grads)?;
        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            curve.push((done, last));
            if done % cfg.checkpoint_every == 0 {
                let path = checkpoint_path(out_dir, done);
                save_denoiser(model, &path)?;
                checkpoints.push((done, path));
            }
        }
    }
    let hash_after = base_weight_hash(model);
    if hash_after != hash_before {
        return Err(Error::invalid(
            "tm_finetune",
            "base weights moved during adapter fine-tuning",
        ));
    }
    Ok(TmReport {
        loss_curve: curve,
        checkpoints,
        base_hash: hash_after,
    })
}

/// Checkpoints under `dir` named `ckpt_<step>.tmdc`, sorted by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name();
        let name = match name.to_str() {
            Some(n) => n,
            None => continue,
        };
        if let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|rest| rest.strip_suffix(".tmdc"))
            .and_then(|num| num.parse::<usize>().ok())
        {
            out.push((step, entry.path()));
        }
    }
    out.sort_by_key(|(step, _)| *step);
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub step: usize,
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub step: usize,
    pub path: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Evaluate every candidate checkpoint on the validation set and pick the
/// most robust one; ties go to the earliest step.
pub fn select_checkpoint(
    candidates: &[(usize, PathBuf)],
    sched: &NoiseSchedule<f64>,
    val_adv: &LabeledDataset,
    eval_cfg: &EvalConfig,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::invalid("select_checkpoint", "no candidates"));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, &PathBuf, f64)> = None;
    for (step, path) in candidates {
        let model = load_denoiser(path)
            .map_err(|e| e.at_stage("select_checkpoint", format!("step {}", step)))?;
        let outcome = evaluate(&model, sched, val_adv, eval_cfg)
            .map_err(|e| e.at_stage("select_checkpoint", format!("step {}", step)))?;
        rows.push(SweepRow {
            step: *step,
            robust_accuracy: outcome.accuracy,
        });
        let better = best
            .as_ref()
            .map(|(_, _, acc)| outcome.accuracy > *acc)
            .unwrap_or(true);
        if better {
            best = Some((*step, path, outcome.accuracy));
        }
    }
    let (step, path, _) = best.expect("candidates nonempty");
    Ok(Selection {
        step,
        path: path.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{EvalMode, PlanStrategy};
    use crate::dataset::{gen_blobs, BlobSpec};
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::{train_base, TrainConfig};
    use crate::lora::{adapter_params, attach_lora};
    use tempfile::tempdir;

    fn tiny_setup() -> (Denoiser, NoiseSchedule<f64>, LabeledDataset) {
        let cfg = DenoiserConfig {
            dim: 4,
            num_classes: 2,
            hidden: 16,
            time_emb_dim: 8,
            class_emb_dim: 6,
        };
        let model = Denoiser::new(cfg, &mut RngStream::new(21, compose(&[domains::INIT, 0]))).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let spec = BlobSpec {
            num_classes: 2,
            dim: 4,
            radius: 0.8,
            sigma: 0.05,
            train_count: 64,
            test_count: 60,
        };
        let (train, _) = gen_blobs(&spec, 17).unwrap();
        (model, sched, train)
    }

    fn tiny_tm(steps: usize, every: usize) -> TmConfig {
        TmConfig {
            steps,
            batch_size: 4,
            timesteps_per_sample: 4,
            lr: 3e-3,
            warmup: 5,
            weight_decay: 0.0,
            checkpoint_every: every,
            lora: LoraSpec { rank: 2, alpha: 16.0 },
        }
    }

    #[test]
    fn finetune_requires_adapters() {
        let (mut model, sched, data) = tiny_setup();
        let dir = tempdir().unwrap();
        let err = tm_finetune(&mut model, &sched, &data, &tiny_tm(10, 5), dir.path(), 1);
        assert!(err.is_err());
    }

    #[test]
    fn finetune_moves_adapters_only_and_checkpoints_on_cadence() {
        let (mut model, sched, data) = tiny_setup();
        attach_lora(&mut model, &LoraSpec { rank: 2, alpha: 16.0 }, &mut RngStream::new(21, 1)).unwrap();
        let before = base_weight_hash(&model);
        let dir = tempdir().unwrap();
        let report = tm_finetune(&mut model, &sched, &data, &tiny_tm(30, 10), dir.path(), 2).unwrap();
        assert_eq!(report.base_hash, before);
        let steps: Vec<usize> = report.checkpoints.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![0, 10, 20, 30]);
        for (_, path) in &report.checkpoints {
            assert!(path.exists());
        }
        // B started at zero; training must have moved it.
        let moved = adapter_params(&model)
            .iter()
            .any(|p| p.name().ends_with("lora_b") && p.value().data().iter().any(|&x| x != 0.0));
        assert!(moved, "adapters never moved");
        assert!(report.loss_curve.iter().all(|(_, l)| l.is_finite()));
        // The listing matches what the report says.
        let listed = list_checkpoints(dir.path()).unwrap();
        assert_eq!(listed.len(), 4);
        assert_eq!(listed.iter().map(|(s, _)| *s).collect::<Vec<_>>(), steps);
    }

    #[test]
    fn finetune_is_deterministic() {
        let (model, sched, data) = tiny_setup();
        let run = |dir: &Path| {
            let mut m = Denoiser::new(model.cfg, &mut RngStream::new(21, compose(&[domains::INIT, 0]))).unwrap();
            attach_lora(&mut m, &LoraSpec { rank: 2, alpha: 16.0 }, &mut RngStream::new(21, 1)).unwrap();
            let report = tm_finetune(&mut m, &sched, &data, &tiny_tm(12, 6), dir, 7).unwrap();
            let values: Vec<Vec<f64>> = adapter_params(&m).iter().map(|p| p.value().to_vec()).collect();
            (report.loss_curve, values)
        };
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let (c1, v1) = run(d1.path());
        let (c2, v2) = run(d2.path());
        assert_eq!(c1, c2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn finetune_reduces_the_true_label_loss() {
        let (mut model, sched, data) = tiny_setup();
        // Light pretraining so the adapters start from a sane base.
        let pre = TrainConfig {
            steps: 150,
            batch_size: 16,
            lr: 1e-2,
            log_every: 50,
        };
        train_base(&mut model, &sched, &data, &pre, 3).unwrap();
        attach_lora(&mut model, &LoraSpec { rank: 2, alpha: 16.0 }, &mut RngStream::new(21, 1)).unwrap();
        let dir = tempdir().unwrap();
        let mut cfg = tiny_tm(200, 100);
        cfg.warmup = 20;
        let report = tm_finetune(&mut model, &sched, &data, &cfg, dir.path(), 4).unwrap();
        let first = report.loss_curve.first().unwrap().1;
        let lastv = report.loss_curve.last().unwrap().1;
        assert!(
            lastv < first,
            "loss did not drop: {} -> {}",
            first,
            lastv
        );
    }

    #[test]
    fn selection_prefers_accuracy_then_earliest_step() {
        let (mut model, sched, data) = tiny_setup();
        let dir = tempdir().unwrap();
        // Candidate A: untrained (zero final layer ties every label, so it
        // always predicts label 0: 50% on balanced data).
        let p_untrained = dir.path().join("ckpt_100.tmdc");
        save_denoiser(&model, &p_untrained).unwrap();
        // Candidate B: briefly trained, should clearly beat candidate A.
        let cfg = TrainConfig {
            steps: 400,
            batch_size: 16,
            lr: 1e-2,
            log_every: 100,
        };
        train_base(&mut model, &sched, &data, &cfg, 5).unwrap();
        let p_trained = dir.path().join("ckpt_200.tmdc");
        save_denoiser(&model, &p_trained).unwrap();

        let eval_cfg = EvalConfig {
            mode: EvalMode::Flat { pairs: 8 },
            strategy: PlanStrategy::EvenlySpaced,
            seed: 9,
        };
        let candidates = list_checkpoints(dir.path()).unwrap();
        assert_eq!(candidates.len(), 2);
        let sel = select_checkpoint(&candidates, &sched, &data, &eval_cfg).unwrap();
        assert_eq!(sel.step, 200, "rows: {:?}", sel.rows);
        assert_eq!(sel.rows.len(), 2);
        assert!(sel.rows[1].robust_accuracy > sel.rows[0].robust_accuracy);

        // Identical accuracies tie toward the earliest step.
        let dup = dir.path().join("ckpt_300.tmdc");
        fs::copy(&p_trained, &dup).unwrap();
        let candidates = list_checkpoints(dir.path()).unwrap();
        let sel = select_checkpoint(&candidates, &sched, &data, &eval_cfg).unwrap();
        assert_eq!(sel.step, 200);
    }
}
