//! Generative classification by comparing denoising losses across labels.
//!
//! Each candidate label explains the input through the conditional denoiser;
//! the label whose noise predictions are best, averaged over a Monte Carlo
//! plan of `(timestep, noise)` pairs, wins. Sharing one plan across labels
//! removes plan-sampling variance from the comparison, so a handful of pairs
//! suffices. Staged evaluation spends a small plan to eliminate hopeless
//! labels and a large one on the finalists, pooling all pair losses drawn so
//! far into running means.

use crate::dataset::LabeledDataset;
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::{compose, domains, RngStream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    /// Timesteps on a rounded inclusive grid over `[0, T-1]`.
    EvenlySpaced,
    /// Timesteps drawn uniformly at random.
    UniformRandom,
}

/// Shared Monte Carlo evidence: `k` timesteps with matching noise draws.
#[derive(Clone, Debug)]
pub struct MCPlan {
    pub ts: Vec<usize>,
    /// `(k, d)` noise, row `i` paired with `ts[i]`.
    pub eps: Tensor<f64>,
}

impl MCPlan {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Contiguous sub-plan `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<MCPlan> {
        if start > end || end > self.len() {
            return Err(Error::invalid(
                "mc_plan_slice",
                format!("[{}, {}) of {}", start, end, self.len()),
            ));
        }
        let d = self.eps.shape()[1];
        Ok(MCPlan {
            ts: self.ts[start..end].to_vec(),
            eps: Tensor::new(
                vec![end - start, d],
                self.eps.data()[start * d..end * d].to_vec(),
            )?,
        })
    }
}

/// Draw a plan of `k` pairs. For a given strategy the draws depend only on
/// the stream state, never on the model or the input, so one plan can be
/// shared across labels and samples.
pub fn make_mc_plan(
    sched: &NoiseSchedule<f64>,
    k: usize,
    strategy: PlanStrategy,
    dim: usize,
    stream: &mut RngStream,
) -> Result<MCPlan> {
    if k == 0 || dim == 0 {
        return Err(Error::invalid("make_mc_plan", "k and dim must be positive"));
    }
    let t_max = sched.len() - 1;
    let ts = match strategy {
        PlanStrategy::EvenlySpaced => (0..k)
            .map(|i| {
                if k == 1 {
                    0
                } else {
                    ((i as f64) * t_max as f64 / (k - 1) as f64).round() as usize
                }
            })
            .collect(),
        PlanStrategy::UniformRandom => {
            let mut ts = Vec::with_capacity(k);
            for _ in 0..k {
                ts.push(stream.below(sched.len() as u64)? as usize);
            }
            ts
        }
    };
    let eps = stream.normal_tensor(vec![k, dim]);
    Ok(MCPlan { ts, eps })
}

/// Noise the input once per plan pair: row `i` is
/// `sqrt(ab_{t_i}) x + sqrt(1 - ab_{t_i}) eps_i`.
fn noised_rows(sched: &NoiseSchedule<f64>, x: &Tensor<f64>, plan: &MCPlan) -> Result<Tensor<f64>> {
    let d = x.shape()[0];
    if plan.eps.shape() != [plan.ts.len(), d] {
        return Err(Error::shape(
            "class_losses",
            format!("plan noise {:?} for dim {}", plan.eps.shape(), d),
        ));
    }
    let mut rows = Vec::with_capacity(plan.len() * d);
    for (i, &t) in plan.ts.iter().enumerate() {
        if t >= sched.len() {
            return Err(Error::invalid(
                "class_losses",
                format!("plan t = {} out of range for T = {}", t, sched.len()),
            ));
        }
        let (a, b) = sched.forward_coeffs(t);
        for (j, &e) in plan.eps.row(i).iter().enumerate() {
            rows.push(a * x.at(j) + b * e);
        }
    }
    Tensor::new(vec![plan.len(), d], rows)
}

/// Per-pair denoising losses of one label: `|eps_i - eps_hat_i|^2 / d` for
/// each plan row.
pub fn class_pair_losses(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule<f64>,
    x: &Tensor<f64>,
    plan: &MCPlan,
    label: usize,
) -> Result<Vec<f64>> {
    if x.rank() != 1 || x.shape()[0] != model.dim() {
        return Err(Error::shape(
            "class_losses",
            format!("input {:?} for model dim {}", x.shape(), model.dim()),
        ));
    }
    let d = model.dim();
    let x_t = noised_rows(sched, x, plan)?;
    let eps_hat = model.predict(&x_t, &plan.ts, label)?;
    if eps_hat.shape() != x_t.shape() {
        return Err(Error::shape(
            "class_losses",
            format!("prediction {:?} vs batch {:?}", eps_hat.shape(), x_t.shape()),
        ));
    }
    let mut out = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let se: f64 = plan
            .eps
            .row(i)
            .iter()
            .zip(eps_hat.row(i))
            .map(|(&e, &p)| (e - p) * (e - p))
            .sum();
        out.push(se / d as f64);
    }
    Ok(out)
}

/// Mean plan loss per label, the Monte Carlo class evidence. Every label is
/// scored against the same plan.
pub fn class_losses(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule<f64>,
    x: &Tensor<f64>,
    plan: &MCPlan,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(labels.len());
    for &label in labels {
        let pairs = class_pair_losses(model, sched, x, plan, label)?;
        out.push(pairs.iter().sum::<f64>() / pairs.len() as f64);
    }
    Ok(out)
}

/// Max-shifted softmax of the negated losses. Lower loss means higher
/// probability; shifting by the minimum loss makes the exponentials safe and
/// leaves the distribution unchanged.
pub fn posterior_from_losses(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::invalid("posterior", "empty loss vector"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::non_finite("posterior"));
    }
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = losses.iter().map(|&l| (-(l - min)).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Lowest-loss label; ties break toward the smaller label.
pub fn argmin_label(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct ClassifyOutcome {
    pub label: usize,
    pub losses: Vec<f64>,
    pub posterior: Vec<f64>,
}

/// Score every label on the plan and pick the argmin.
pub fn classify(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule<f64>,
    x: &Tensor<f64>,
    plan: &MCPlan,
) -> Result<ClassifyOutcome> {
    let labels: Vec<usize> = (0..model.num_classes()).collect();
    let losses = class_losses(model, sched, x, plan, &labels)?;
    let posterior = posterior_from_losses(&losses)?;
    Ok(ClassifyOutcome {
        label: argmin_label(&losses),
        losses,
        posterior,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    /// Plan pairs drawn in this stage.
    pub pairs: usize,
    /// Labels surviving after this stage's ranking.
    pub keep: usize,
}

/// Elimination schedule. Keeps are non-increasing and end at one survivor.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn new(stages: Vec<(usize, usize)>) -> Self {
        StagePlan {
            stages: stages
                .into_iter()
                .map(|(pairs, keep)| Stage { pairs, keep })
                .collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("stage_plan", "no stages"));
        }
        let mut prev = num_classes;
        for (i, s) in self.stages.iter().enumerate() {
            if s.pairs == 0 {
                return Err(Error::invalid("stage_plan", format!("stage {} has no pairs", i)));
            }
            if s.keep == 0 || s.keep > prev {
                return Err(Error::invalid(
                    "stage_plan",
                    format!("stage {} keeps {} of {}", i, s.keep, prev),
                ));
            }
            prev = s.keep;
        }
        if prev != 1 {
            return Err(Error::invalid("stage_plan", "final stage must keep one label"));
        }
        Ok(())
    }

    /// Same pair budget with no eliminations before the final ranking: the
    /// exhaustive reference that staged runs are compared against.
    pub fn keep_all_variant(&self, num_classes: usize) -> StagePlan {
        let last = self.stages.len() - 1;
        StagePlan {
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| Stage {
                    pairs: s.pairs,
                    keep: if i == last { 1 } else { num_classes },
                })
                .collect(),
        }
    }
}

/// Cheap screening stage of 10 pairs keeping half the labels, then a 100-pair
/// decision stage.
pub fn default_stage_plan(num_classes: usize) -> StagePlan {
    StagePlan::new(vec![(10, num_classes.div_ceil(2)), (100, 1)])
}

#[derive(Clone, Debug)]
pub struct StagedOutcome {
    pub label: usize,
    /// Pooled mean loss per label; `None` for labels eliminated before
    /// receiving any pairs (impossible in stage one, so always present
    /// unless the pool never reached the label).
    pub mean_losses: Vec<Option<f64>>,
    /// Posterior over the labels still priced at the end, from pooled means;
    /// `None` for eliminated labels.
    pub posterior: Vec<Option<f64>>,
    /// Total predictor pair evaluations spent.
    pub pair_evals: usize,
}

/// Staged classification. Each stage draws its plan from the stream exactly
/// as `make_mc_plan` would (so a one-stage plan reproduces `classify` on the
/// same stream), scores the surviving labels, pools the pair losses into
/// running means, and keeps the best `keep` labels, ties toward smaller
/// labels.
pub fn classify_staged(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule<f64>,
    x: &Tensor<f64>,
    plan: &StagePlan,
    strategy: PlanStrategy,
    stream: &mut RngStream,
) -> Result<StagedOutcome> {
    let c = model.num_classes();
    plan.validate(c)?;
    let mut survivors: Vec<usize> = (0..c).collect();
    let mut sums = vec![0.0f64; c];
    let mut counts = vec![0usize; c];
    let mut pair_evals = 0usize;
    for stage in &plan.stages {
        let mc = make_mc_plan(sched, stage.pairs, strategy, x.shape()[0], stream)?;
        for &label in &survivors {
            let pairs = class_pair_losses(model, sched, x, &mc, label)?;
            sums[label] += pairs.iter().sum::<f64>();
            counts[label] += pairs.len();
            pair_evals += pairs.len();
        }
        survivors.sort_by(|&a, &b| {
            let ma = sums[a] / counts[a] as f64;
            let mb = sums[b] / counts[b] as f64;
            ma.partial_cmp(&mb)
                .expect("finite means")
                .then(a.cmp(&b))
        });
        survivors.truncate(stage.keep);
        survivors.sort_unstable();
    }
    debug_assert_eq!(survivors.len(), 1);
    let label = survivors[0];
    let mean_losses: Vec<Option<f64>> = (0..c)
        .map(|l| (counts[l] > 0).then(|| sums[l] / counts[l] as f64))
        .collect();
    let surviving_means: Vec<f64> = mean_losses.iter().filter_map(|m| *m).collect();
    let surviving_posterior = posterior_from_losses(&surviving_means)?;
    let mut posterior = Vec::with_capacity(c);
    let mut cursor = 0;
    for m in &mean_losses {
        posterior.push(m.is_some().then(|| {
            let p = surviving_posterior[cursor];
            cursor += 1;
            p
        }));
    }
    Ok(StagedOutcome {
        label,
        mean_losses,
        posterior,
        pair_evals,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum EvalMode {
    /// One plan of `pairs` pairs scoring every label.
    Flat { pairs: usize },
    /// Staged elimination.
    Staged(StagePlan),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub strategy: PlanStrategy,
    pub seed: u64,
}

/// Per-sample evaluation record. Losses and posterior entries are `None` for
/// labels a staged run eliminated before pricing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub true_label: usize,
    pub predicted: usize,
    pub losses: Vec<Option<f64>>,
    pub posterior: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub records: Vec<SampleRecord>,
}

/// Classify every sample of the dataset. Each sample owns a stream keyed by
/// `(seed, sample index)`, so results are independent of evaluation order
/// and the work can fan out across threads.
pub fn evaluate(
    model: &(dyn NoisePredictor + Sync),
    sched: &NoiseSchedule<f64>,
    data: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    if data.num_classes() > model.num_classes() {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "data has {} classes, model {}",
                data.num_classes(),
                model.num_classes()
            ),
        ));
    }
    if let EvalMode::Staged(plan) = &cfg.mode {
        plan.validate(model.num_classes())?;
    }
    let records: Result<Vec<SampleRecord>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut stream = RngStream::new(cfg.seed, compose(&[domains::EVAL, i as u64]));
            let x = data.sample(i);
            let (predicted, losses, posterior) = match &cfg.mode {
                EvalMode::Flat { pairs } => {
                    let plan = make_mc_plan(sched, *pairs, cfg.strategy, data.dim(), &mut stream)?;
                    let out = classify(model, sched, &x, &plan)?;
                    (
                        out.label,
                        out.losses.into_iter().map(Some).collect(),
                        out.posterior.into_iter().map(Some).collect(),
                    )
                }
                EvalMode::Staged(plan) => {
                    let out = classify_staged(model, sched, &x, plan, cfg.strategy, &mut stream)?;
                    (out.label, out.mean_losses, out.posterior)
                }
            };
            Ok(SampleRecord {
                sample_id: i,
                true_label: data.label(i),
                predicted,
                losses,
                posterior,
            })
        })
        .collect();
    let records = records?;
    let hits = records
        .iter()
        .filter(|r| r.predicted == r.true_label)
        .count();
    Ok(EvalOutcome {
        accuracy: hits as f64 / records.len() as f64,
        records,
    })
}
