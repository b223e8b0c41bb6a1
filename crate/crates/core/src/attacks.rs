//! Gradient attacks under a norm budget inside the data box `[-1, 1]`.
//!
//! All attacks maximize a caller-supplied loss. The restart engine tracks the
//! best endpoint across trajectories, halves its step when progress stalls
//! (jumping back to the incumbent best iterate), and can stop early once a
//! success predicate holds; plain `pgd` is the single-trajectory,
//! no-halving special case.

use crate::autodiff::{Tape, Val};
use crate::classifier::{classify, MCPlan};
use crate::dataset::LabeledDataset;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{compose, domains, RngStream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Half-width of the data box every sample lives in.
pub const DATA_BOUND: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    PgdRestarts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    pub epsilon: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Defaults to `epsilon / 4`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_random_start")]
    pub random_start: bool,
    /// Iterations without improvement before the step halves and the
    /// trajectory jumps back to its best iterate. `None` disables halving.
    #[serde(default = "default_patience")]
    pub halving_patience: Option<usize>,
}

fn default_norm() -> NormKind {
    NormKind::Linf
}

fn default_iters() -> usize {
    40
}

fn default_restarts() -> usize {
    1
}

fn default_random_start() -> bool {
    true
}

fn default_patience() -> Option<usize> {
    Some(5)
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("attack_config", "epsilon must be positive"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::invalid("attack_config", "step_size must be positive"));
            }
        }
        match self.kind {
            AttackKind::Fgsm => {}
            AttackKind::Pgd | AttackKind::PgdRestarts => {
                if self.iters == 0 {
                    return Err(Error::invalid("attack_config", "iters must be positive"));
                }
                if self.restarts == 0 {
                    return Err(Error::invalid("attack_config", "restarts must be positive"));
                }
                if self.halving_patience == Some(0) {
                    return Err(Error::invalid("attack_config", "halving patience must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn transfer_pgd(epsilon: f64, iters: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            norm: NormKind::Linf,
            epsilon,
            iters,
            step_size: None,
            restarts: 1,
            random_start: true,
            halving_patience: None,
        }
    }
}

/// Project a perturbation onto the norm ball of radius `eps`. A perturbation
/// already inside the ball is returned unchanged, bit for bit.
pub fn project(delta: &Tensor<f64>, norm: NormKind, eps: f64) -> Tensor<f64> {
    match norm {
        NormKind::Linf => {
            if delta.linf_norm() <= eps {
                delta.clone()
            } else {
                delta.clamp(-eps, eps)
            }
        }
        NormKind::L2 => {
            let n = delta.l2_norm();
            if n <= eps {
                delta.clone()
            } else {
                delta.scale(eps / n)
            }
        }
    }
}

/// Loss and input-gradient of the objective being maximized.
pub type LossGrad<'a> = dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> + Sync + 'a;
/// Predicate that tells the restart engine the attack already succeeded.
pub type SuccessCheck<'a> = dyn Fn(&Tensor<f64>) -> Result<bool> + Sync + 'a;

fn clamp_box(x: &Tensor<f64>) -> Tensor<f64> {
    x.clamp(-DATA_BOUND, DATA_BOUND)
}

/// Strict sign with `sign(0) = 0`, unlike `f64::signum`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ascent_direction(g: &Tensor<f64>, norm: NormKind) -> Tensor<f64> {
    match norm {
        NormKind::Linf => g.map(sign),
        NormKind::L2 => {
            let n = g.l2_norm();
            if n == 0.0 {
                Tensor::zeros(g.shape().to_vec())
            } else {
                g.scale(1.0 / n)
            }
        }
    }
}

/// Uniform draw from the norm ball of radius `eps`.
fn random_delta(norm: NormKind, eps: f64, dim: usize, stream: &mut RngStream) -> Tensor<f64> {
    match norm {
        NormKind::Linf => {
            let data = (0..dim).map(|_| stream.uniform_in(-eps, eps)).collect();
            Tensor::new(vec![dim], data).expect("dim elements")
        }
        NormKind::L2 => {
            let dir = stream.normal_tensor(vec![dim]);
            let n = dir.l2_norm();
            if n == 0.0 {
                return Tensor::zeros(vec![dim]);
            }
            let radius = eps * stream.uniform().powf(1.0 / dim as f64);
            dir.scale(radius / n)
        }
    }
}

/// One-step sign attack. Coordinates with zero gradient stay put; the box
/// clamp may shorten steps near the boundary.
pub fn fgsm(loss_grad: &LossGrad, x: &Tensor<f64>, epsilon: f64) -> Result<Tensor<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("fgsm", "epsilon must be positive"));
    }
    let (_, g) = loss_grad(x)?;
    if !g.all_finite() {
        return Err(Error::non_finite("fgsm gradient"));
    }
    let stepped = x.add(&ascent_direction(&g, NormKind::Linf).scale(epsilon))?;
    Ok(clamp_box(&stepped))
}

/// Outcome of the restart engine.
#[derive(Clone, Debug)]
pub struct RestartReport {
    pub x_adv: Tensor<f64>,
    /// Loss of `x_adv` (the best trajectory endpoint).
    pub best_loss: f64,
    /// Incumbent best evaluated loss after every objective evaluation;
    /// nondecreasing by construction.
    pub best_history: Vec<f64>,
    pub succeeded: bool,
    pub trajectories: usize,
}

/// Run one projected-ascent trajectory from `x0 + start_delta`. Returns the
/// endpoint and its loss; `run_best`/`history` accumulate the incumbent best
/// loss across every evaluation of the whole attack.
fn trajectory(
    loss_grad: &LossGrad,
    x0: &Tensor<f64>,
    start_delta: &Tensor<f64>,
    cfg: &AttackConfig,
    history: &mut Vec<f64>,
    run_best: &mut f64,
) -> Result<(Tensor<f64>, f64)> {
    let mut step = cfg.step();
    let mut x = clamp_box(&x0.add(start_delta)?);
    let mut best_l = f64::NEG_INFINITY;
    let mut best_x = x.clone();
    let mut stalled = 0usize;
    let record = |l: f64, history: &mut Vec<f64>, run_best: &mut f64| {
        if l > *run_best {
            *run_best = l;
        }
        history.push(*run_best);
    };
    for it in 0..cfg.iters {
        let (l, g) = loss_grad(&x)?;
        if !l.is_finite() || !g.all_finite() {
            return Err(Error::non_finite(format!("attack objective at iteration {}", it)));
        }
        record(l, history, run_best);
        if l > best_l {
            best_l = l;
            best_x = x.clone();
            stalled = 0;
        } else {
            stalled += 1;
        }
        if let Some(patience) = cfg.halving_patience {
            if stalled >= patience {
                step /= 2.0;
                x = best_x.clone();
                stalled = 0;
                continue;
            }
        }
        let dir = ascent_direction(&g, cfg.norm);
        let stepped = x.add(&dir.scale(step))?;
        let delta = project(&stepped.sub(x0)?, cfg.norm, cfg.epsilon);
        x = clamp_box(&x0.add(&delta)?);
    }
    let (endpoint_loss, _) = loss_grad(&x)?;
    if !endpoint_loss.is_finite() {
        return Err(Error::non_finite("attack objective at endpoint"));
    }
    record(endpoint_loss, history, run_best);
    Ok((x, endpoint_loss))
}

/// Multi-restart projected ascent. Candidates are trajectory endpoints; the
/// first restart starts per `cfg.random_start`, later restarts perturb the
/// incumbent best endpoint by a fresh half-radius draw. Stops early when
/// `success` accepts an endpoint.
pub fn pgd_restarts(
    loss_grad: &LossGrad,
    x: &Tensor<f64>,
    cfg: &AttackConfig,
    stream: &mut RngStream,
    success: Option<&SuccessCheck>,
) -> Result<RestartReport> {
    cfg.validate()?;
    if x.rank() != 1 {
        return Err(Error::shape("pgd", format!("{:?}", x.shape())));
    }
    let dim = x.shape()[0];
    let mut history = Vec::new();
    let mut run_best = f64::NEG_INFINITY;
    let mut incumbent: Option<(f64, Tensor<f64>)> = None;
    let mut succeeded = false;
    let mut trajectories = 0usize;
    for r in 0..cfg.restarts {
        let start_delta = if r == 0 {
            if cfg.random_start {
                random_delta(cfg.norm, cfg.epsilon, dim, stream)
            } else {
                Tensor::zeros(vec![dim])
            }
        } else {
            let (_, best_x) = incumbent.as_ref().expect("set after first trajectory");
            let around = best_x.sub(x)?;
            let jitter = random_delta(cfg.norm, cfg.epsilon / 2.0, dim, stream);
            project(&around.add(&jitter)?, cfg.norm, cfg.epsilon)
        };
        let (endpoint, endpoint_loss) =
            trajectory(loss_grad, x, &start_delta, cfg, &mut history, &mut run_best)?;
        trajectories += 1;
        let better = incumbent
            .as_ref()
            .map(|(l, _)| endpoint_loss > *l)
            .unwrap_or(true);
        if better {
            incumbent = Some((endpoint_loss, endpoint));
        }
        if let Some(check) = success {
            let candidate = &incumbent.as_ref().expect("just set").1;
            if check(candidate)? {
                succeeded = true;
                break;
            }
        }
    }
    let (best_loss, x_adv) = incumbent.expect("at least one trajectory");
    Ok(RestartReport {
        x_adv,
        best_loss,
        best_history: history,
        succeeded,
        trajectories,
    })
}

/// Standard projected gradient ascent: one trajectory, fixed step, endpoint
/// returned. Equivalent to `pgd_restarts` with one restart and halving off.
pub fn pgd(
    loss_grad: &LossGrad,
    x: &Tensor<f64>,
    cfg: &AttackConfig,
    stream: &mut RngStream,
) -> Result<Tensor<f64>> {
    let single = AttackConfig {
        restarts: 1,
        halving_patience: None,
        ..*cfg
    };
    Ok(pgd_restarts(loss_grad, x, &single, stream, None)?.x_adv)
}

/// A classification model a whole dataset attack can be run against.
pub trait AttackObjective: Sync {
    /// Loss to maximize (higher = more adversarial for `label`) and its
    /// gradient w.r.t. the input.
    fn loss_grad(&self, x: &Tensor<f64>, label: usize) -> Result<(f64, Tensor<f64>)>;
    /// Whether the model already misclassifies `x` away from `label`.
    fn is_adversarial(&self, x: &Tensor<f64>, label: usize) -> Result<bool>;
}

/// Differentiable objective against the diffusion classifier: cross-entropy
/// of the plan-based label posterior at the true label. The plan is fixed,
/// so iterations ascend one deterministic function.
pub struct DiffusionObjective<'a> {
    pub model: &'a Denoiser,
    pub sched: &'a NoiseSchedule<f64>,
    pub plan: &'a MCPlan,
}

impl DiffusionObjective<'_> {
    fn losses_on_tape(&self, x: &Tensor<f64>) -> Result<(Tape<f64>, Vec<Val>, Val)> {
        let d = self.model.cfg.dim;
        let k = self.plan.len();
        if x.shape() != [d] {
            return Err(Error::shape(
                "diffusion_objective",
                format!("{:?} for dim {}", x.shape(), d),
            ));
        }
        let mut signal = Vec::with_capacity(k * d);
        let mut noise = Vec::with_capacity(k * d);
        for (i, &t) in self.plan.ts.iter().enumerate() {
            let (a, b) = self.sched.forward_coeffs(t);
            for &e in self.plan.eps.row(i) {
                signal.push(a);
                noise.push(b * e);
            }
        }
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let xrep = tape.repeat_rows(xv, k)?;
        let signal = tape.constant(Tensor::new(vec![k, d], signal)?)?;
        let noise = tape.constant(Tensor::new(vec![k, d], noise)?)?;
        let scaled = tape.mul(xrep, signal)?;
        let x_t = tape.add(scaled, noise)?;
        let eps_c = tape.constant(self.plan.eps.clone())?;
        let mut losses = Vec::with_capacity(self.model.cfg.num_classes);
        for label in 0..self.model.cfg.num_classes {
            let ys = vec![label; k];
            let eps_hat = self.model.forward_on(&mut tape, x_t, &self.plan.ts, &ys)?;
            let per_pair = tape.row_squared_l2(eps_hat, eps_c)?;
            let total = tape.sum_all(per_pair)?;
            losses.push(tape.scale(total, 1.0 / (k * d) as f64)?);
        }
        Ok((tape, losses, xv))
    }
}

impl AttackObjective for DiffusionObjective<'_> {
    fn loss_grad(&self, x: &Tensor<f64>, label: usize) -> Result<(f64, Tensor<f64>)> {
        if label >= self.model.cfg.num_classes {
            return Err(Error::invalid("diffusion_objective", format!("label {}", label)));
        }
        let (mut tape, losses, xv) = self.losses_on_tape(x)?;
        // CE of the softmax over negated losses at the true label:
        // L_true + log sum_j exp(-L_j).
        let stacked = tape.stack_scalars(&losses)?;
        let neg = tape.scale(stacked, -1.0)?;
        let lse = tape.logsumexp(neg)?;
        let objective = tape.add(losses[label], lse)?;
        let value = tape.value(objective).scalar_value();
        let grads = tape.backward(objective)?;
        let g = grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((value, g))
    }

    fn is_adversarial(&self, x: &Tensor<f64>, label: usize) -> Result<bool> {
        Ok(classify(self.model, self.sched, x, self.plan)?.label != label)
    }
}

/// Run the configured attack against one sample.
pub fn attack_sample(
    obj: &dyn AttackObjective,
    x: &Tensor<f64>,
    label: usize,
    cfg: &AttackConfig,
    stream: &mut RngStream,
) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let loss_grad = |p: &Tensor<f64>| obj.loss_grad(p, label);
    match cfg.kind {
        AttackKind::Fgsm => fgsm(&loss_grad, x, cfg.epsilon),
        AttackKind::Pgd => pgd(&loss_grad, x, cfg, stream),
        AttackKind::PgdRestarts => {
            let success = |p: &Tensor<f64>| obj.is_adversarial(p, label);
            Ok(pgd_restarts(&loss_grad, x, cfg, stream, Some(&success))?.x_adv)
        }
    }
}

/// Direct white-box attack on the diffusion classifier itself.
pub fn direct_attack_diffusion(
    model: &Denoiser,
    sched: &NoiseSchedule<f64>,
    plan: &MCPlan,
    x: &Tensor<f64>,
    label: usize,
    cfg: &AttackConfig,
    stream: &mut RngStream,
) -> Result<Tensor<f64>> {
    let obj = DiffusionObjective { model, sched, plan };
    attack_sample(&obj, x, label, cfg, stream)
}

/// Everything needed to regenerate or audit an adversarial set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackProvenance {
    pub config: AttackConfig,
    pub seed: u64,
    /// SHA-256 of the checkpoint of the model the gradients came from.
    pub source_model_sha256: String,
    /// Fraction of samples the source model misclassifies after the attack.
    pub success_rate: f64,
    pub count: usize,
}

/// Attack every sample of a dataset with its true label. Each sample owns a
/// stream keyed by `(seed, index)`; work fans out across threads. Norm and
/// box invariants are verified on every output before it is accepted.
pub fn gen_adv_dataset(
    obj: &dyn AttackObjective,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    seed: u64,
    source_model_sha256: &str,
) -> Result<(LabeledDataset, AttackProvenance)> {
    cfg.validate()?;
    let rows: Result<Vec<(Vec<f64>, bool)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut stream = RngStream::new(seed, compose(&[domains::ATTACK, i as u64]));
            let x = data.sample(i);
            let label = data.label(i);
            let x_adv = attack_sample(obj, &x, label, cfg, &mut stream)
                .map_err(|e| e.at_stage("gen_adv_dataset", format!("sample {}", i)))?;
            check_attack_invariants(&x, &x_adv, cfg)
                .map_err(|e| e.at_stage("gen_adv_dataset", format!("sample {}", i)))?;
            let fooled = obj.is_adversarial(&x_adv, label)?;
            Ok((x_adv.to_vec(), fooled))
        })
        .collect();
    let rows = rows?;
    let fooled = rows.iter().filter(|(_, f)| *f).count();
    let mut features = Vec::with_capacity(data.len() * data.dim());
    for (row, _) in &rows {
        features.extend_from_slice(row);
    }
    let adv = LabeledDataset::new(
        Tensor::new(vec![data.len(), data.dim()], features)?,
        data.labels().to_vec(),
        data.num_classes(),
    )?;
    let provenance = AttackProvenance {
        config: *cfg,
        seed,
        source_model_sha256: source_model_sha256.to_string(),
        success_rate: fooled as f64 / data.len() as f64,
        count: data.len(),
    };
    Ok((adv, provenance))
}

/// Norm budget within 1e-9 and box bounds exactly.
pub fn check_attack_invariants(
    x: &Tensor<f64>,
    x_adv: &Tensor<f64>,
    cfg: &AttackConfig,
) -> Result<()> {
    let delta = x_adv.sub(x)?;
    let norm = match cfg.norm {
        NormKind::Linf => delta.linf_norm(),
        NormKind::L2 => delta.l2_norm(),
    };
    if norm > cfg.epsilon + 1e-9 {
        return Err(Error::invalid(
            "attack_invariant",
            format!("perturbation norm {} exceeds budget {}", norm, cfg.epsilon),
        ));
    }
    if x_adv.linf_norm() > DATA_BOUND {
        return Err(Error::invalid(
            "attack_invariant",
            format!("output leaves the data box: |x|_inf = {}", x_adv.linf_norm()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_objective(center: Vec<f64>) -> impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> + Sync {
        // loss = -|x - c|^2, maximized exactly at c.
        move |x: &Tensor<f64>| {
            let c = Tensor::new(vec![center.len()], center.clone()).unwrap();
            let diff = x.sub(&c)?;
            let loss = -diff.data().iter().map(|d| d * d).sum::<f64>();
            Ok((loss, diff.scale(-2.0)))
        }
    }

    fn pgd_cfg(eps: f64, iters: usize) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Pgd,
            norm: NormKind::Linf,
            epsilon: eps,
            iters,
            step_size: None,
            restarts: 1,
            random_start: true,
            halving_patience: None,
        }
    }

    #[test]
    fn project_linf_and_l2() {
        let delta = Tensor::new(vec![3], vec![0.3, -0.05, 0.2]).unwrap();
        let p = project(&delta, NormKind::Linf, 0.1);
        assert_eq!(p.to_vec(), vec![0.1, -0.05, 0.1]);
        // Inside the ball: unchanged bit for bit.
        let small = Tensor::new(vec![3], vec![0.01, -0.02, 0.03]).unwrap();
        assert_eq!(project(&small, NormKind::Linf, 0.1), small);
        assert_eq!(project(&small, NormKind::L2, 1.0), small);
        // L2 at twice the radius lands exactly on the sphere.
        let big = Tensor::new(vec![2], vec![0.6, 0.8]).unwrap(); // norm 1.0
        let p = project(&big, NormKind::L2, 0.5);
        assert!((p.l2_norm() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fgsm_saturates_where_gradient_is_nonzero() {
        // Linear loss w . x: gradient w has a zero coordinate.
        let w = vec![1.0, -2.0, 0.0, 0.5];
        let obj = move |x: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
            let wt = Tensor::new(vec![4], w.clone()).unwrap();
            let loss: f64 = x.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            Ok((loss, wt))
        };
        let x = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let adv = fgsm(&obj, &x, 0.05).unwrap();
        let delta = adv.sub(&x).unwrap();
        for (got, want) in delta.to_vec().iter().zip([0.05, -0.05, 0.0, 0.05]) {
            assert!((got - want).abs() < 1e-15, "{} vs {}", got, want);
        }
    }

    #[test]
    fn fgsm_respects_the_data_box() {
        let obj = |_: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
            Ok((0.0, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()))
        };
        let x = Tensor::new(vec![2], vec![0.99, -0.5]).unwrap();
        let adv = fgsm(&obj, &x, 0.05).unwrap();
        assert_eq!(adv.to_vec(), vec![1.0, -0.45]);
    }

    #[test]
    fn pgd_stays_in_ball_and_box_and_is_deterministic() {
        let obj = quadratic_objective(vec![2.0, -2.0, 0.0]);
        let x = Tensor::new(vec![3], vec![0.9, -0.9, 0.1]).unwrap();
        let cfg = pgd_cfg(0.2, 25);
        let mut s1 = RngStream::new(5, 1);
        let mut s2 = RngStream::new(5, 1);
        let a = pgd(&obj, &x, &cfg, &mut s1).unwrap();
        let b = pgd(&obj, &x, &cfg, &mut s2).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        check_attack_invariants(&x, &a, &cfg).unwrap();
        // The objective pushes toward (2, -2, .); the ball and box bind.
        assert!((a.at(0) - 1.0).abs() < 1e-12); // box: 0.9 + 0.2 > 1
        assert!((a.at(1) - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn pgd_l2_respects_the_l2_ball() {
        let obj = quadratic_objective(vec![3.0, 3.0, 3.0, 3.0]);
        let x = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let cfg = AttackConfig {
            norm: NormKind::L2,
            ..pgd_cfg(0.3, 30)
        };
        let mut stream = RngStream::new(6, 1);
        let adv = pgd(&obj, &x, &cfg, &mut stream).unwrap();
        let norm = adv.sub(&x).unwrap().l2_norm();
        assert!(norm <= 0.3 + 1e-9);
        assert!(norm > 0.29, "expected to reach the boundary, got {}", norm);
    }

    #[test]
    fn restarts_one_without_halving_equals_pgd() {
        let obj = quadratic_objective(vec![0.5, 0.5]);
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let cfg = pgd_cfg(0.1, 15);
        let mut s1 = RngStream::new(7, 2);
        let mut s2 = RngStream::new(7, 2);
        let via_pgd = pgd(&obj, &x, &cfg, &mut s1).unwrap();
        let report = pgd_restarts(&obj, &x, &cfg, &mut s2, None).unwrap();
        assert_eq!(via_pgd.to_vec(), report.x_adv.to_vec());
        assert_eq!(report.trajectories, 1);
    }

    #[test]
    fn best_history_is_nondecreasing_and_restarts_help() {
        let obj = quadratic_objective(vec![0.05, -0.03]);
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let cfg = AttackConfig {
            kind: AttackKind::PgdRestarts,
            restarts: 3,
            halving_patience: Some(5),
            ..pgd_cfg(0.1, 20)
        };
        let mut stream = RngStream::new(8, 3);
        let report = pgd_restarts(&obj, &x, &cfg, &mut stream, None).unwrap();
        assert_eq!(report.trajectories, 3);
        for w in report.best_history.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // The optimum is inside the ball; halving should get very close.
        assert!(report.best_loss > -1e-4, "best {}", report.best_loss);
        check_attack_invariants(&x, &report.x_adv, &cfg).unwrap();
    }

    #[test]
    fn success_check_stops_restarts_early() {
        let obj = quadratic_objective(vec![1.0, 1.0]);
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let cfg = AttackConfig {
            kind: AttackKind::PgdRestarts,
            restarts: 5,
            ..pgd_cfg(0.1, 5)
        };
        let mut stream = RngStream::new(9, 4);
        let always = |_: &Tensor<f64>| -> Result<bool> { Ok(true) };
        let report = pgd_restarts(&obj, &x, &cfg, &mut stream, Some(&always)).unwrap();
        assert!(report.succeeded);
        assert_eq!(report.trajectories, 1);
        let mut stream = RngStream::new(9, 4);
        let never = |_: &Tensor<f64>| -> Result<bool> { Ok(false) };
        let report = pgd_restarts(&obj, &x, &cfg, &mut stream, Some(&never)).unwrap();
        assert!(!report.succeeded);
        assert_eq!(report.trajectories, 5);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        assert!(pgd_cfg(0.0, 10).validate().is_err());
        assert!(pgd_cfg(-0.1, 10).validate().is_err());
        assert!(pgd_cfg(0.1, 0).validate().is_err());
        let mut c = pgd_cfg(0.1, 10);
        c.restarts = 0;
        assert!(c.validate().is_err());
        c = pgd_cfg(0.1, 10);
        c.halving_patience = Some(0);
        assert!(c.validate().is_err());
        c = pgd_cfg(0.1, 10);
        c.step_size = Some(0.0);
        assert!(c.validate().is_err());
        assert!(pgd_cfg(0.1, 10).validate().is_ok());
    }

    #[test]
    fn zero_gradient_moves_nothing() {
        let obj = |_: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> { Ok((1.0, Tensor::zeros(vec![3]))) };
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let adv = fgsm(&obj, &x, 0.05).unwrap();
        assert_eq!(adv.to_vec(), x.to_vec());
        let cfg = AttackConfig {
            random_start: false,
            ..pgd_cfg(0.05, 10)
        };
        let mut stream = RngStream::new(10, 5);
        let adv = pgd(&obj, &x, &cfg, &mut stream).unwrap();
        assert_eq!(adv.to_vec(), x.to_vec());
    }
}
