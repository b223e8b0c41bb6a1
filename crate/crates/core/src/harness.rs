//! End-to-end experiment pipeline. Each stage reads its inputs from the run
//! directory and writes its outputs back, so stages can be run one at a
//! time or all together, and a finished run can be regenerated byte for
//! byte from its config.

use crate::attacks::{gen_adv_dataset, AttackConfig, AttackKind, NormKind};
use crate::baseline::{
    adversarial_train, train_discriminative, BaselineConfig, DiscriminativeModel,
    DiscriminativeObjective,
};
use crate::checkpoint::{load_baseline, load_denoiser, save_baseline, save_denoiser, sha256_file};
use crate::classifier::{evaluate, EvalConfig, EvalMode, PlanStrategy};
use crate::dataset::{gen_blobs, BlobSpec, LabeledDataset};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{train_base, TrainConfig};
use crate::error::{Error, Result};
use crate::lora::attach_lora;
use crate::report::{
    build_report, run_id, write_eval_csv, write_json, write_metrics_csv, MetricRow, RunReport,
};
use crate::rng::{compose, domains, RngStream};
use crate::schedule::NoiseSchedule;
use crate::tm::{list_checkpoints, select_checkpoint, tm_finetune, Selection, SweepRow, TmConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_timesteps() -> usize {
    100
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            timesteps: default_timesteps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserHyper {
    #[serde(default = "default_denoiser_hidden")]
    pub hidden: usize,
    #[serde(default = "default_time_emb")]
    pub time_emb_dim: usize,
    #[serde(default = "default_class_emb")]
    pub class_emb_dim: usize,
}

fn default_denoiser_hidden() -> usize {
    128
}

fn default_time_emb() -> usize {
    32
}

fn default_class_emb() -> usize {
    16
}

impl Default for DenoiserHyper {
    fn default() -> Self {
        DenoiserHyper {
            hidden: default_denoiser_hidden(),
            time_emb_dim: default_time_emb(),
            class_emb_dim: default_class_emb(),
        }
    }
}

/// Full experiment description. Every field has a reference default, so a
/// config file only spells out deviations.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_data")]
    pub data: BlobSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub denoiser: DenoiserHyper,
    #[serde(default = "default_baseline_hidden")]
    pub baseline_hidden: usize,
    /// The surrogate sees only this many of the first training samples; a
    /// small slice keeps it in the interpolation regime transfer attacks
    /// thrive on.
    #[serde(default = "default_surrogate_subset")]
    pub surrogate_subset: usize,
    /// Validation samples taken from the tail of the training set.
    #[serde(default = "default_val_count")]
    pub val_count: usize,
    #[serde(default = "default_diffusion_train")]
    pub diffusion_train: TrainConfig,
    #[serde(default = "default_surrogate_train")]
    pub surrogate_train: TrainConfig,
    #[serde(default = "default_adv_train")]
    pub adv_train: TrainConfig,
    #[serde(default = "default_adv_train_attack")]
    pub adv_train_attack: AttackConfig,
    /// The attack whose outputs every model is scored on: PGD against the
    /// surrogate, transferred everywhere else.
    #[serde(default = "default_transfer_attack")]
    pub transfer_attack: AttackConfig,
    #[serde(default)]
    pub tm: TmConfig,
    #[serde(default = "default_test_pairs")]
    pub eval_test_pairs: usize,
    #[serde(default = "default_sweep_pairs")]
    pub eval_sweep_pairs: usize,
    #[serde(default = "default_strategy")]
    pub plan_strategy: PlanStrategy,
}

fn default_seed() -> u64 {
    2024
}

fn default_data() -> BlobSpec {
    BlobSpec {
        num_classes: 4,
        dim: 16,
        radius: 0.15,
        sigma: 0.06,
        train_count: 2000,
        test_count: 512,
    }
}

fn default_baseline_hidden() -> usize {
    128
}

fn default_surrogate_subset() -> usize {
    400
}

fn default_val_count() -> usize {
    256
}

fn default_diffusion_train() -> TrainConfig {
    TrainConfig {
        steps: 4000,
        batch_size: 64,
        lr: 1e-3,
        log_every: 100,
    }
}

fn default_surrogate_train() -> TrainConfig {
    TrainConfig {
        steps: 8000,
        batch_size: 8,
        lr: 1e-3,
        log_every: 200,
    }
}

fn default_adv_train() -> TrainConfig {
    TrainConfig {
        steps: 1200,
        batch_size: 32,
        lr: 1e-3,
        log_every: 100,
    }
}

fn default_adv_train_attack() -> AttackConfig {
    AttackConfig {
        kind: AttackKind::Pgd,
        norm: NormKind::Linf,
        epsilon: 0.05,
        iters: 10,
        step_size: None,
        restarts: 1,
        random_start: true,
        halving_patience: None,
    }
}

fn default_transfer_attack() -> AttackConfig {
    AttackConfig::transfer_pgd(0.05, 40)
}

fn default_test_pairs() -> usize {
    50
}

fn default_sweep_pairs() -> usize {
    20
}

fn default_strategy() -> PlanStrategy {
    PlanStrategy::UniformRandom
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_value(serde_json::json!({})).expect("all fields defaulted")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.build()?;
        self.diffusion_train.validate()?;
        self.surrogate_train.validate()?;
        self.adv_train.validate()?;
        self.adv_train_attack.validate()?;
        self.transfer_attack.validate()?;
        self.tm.validate()?;
        if self.val_count == 0 || self.val_count >= self.data.train_count {
            return Err(Error::Config(format!(
                "val_count {} must sit inside the training set of {}",
                self.val_count, self.data.train_count
            )));
        }
        if self.surrogate_subset == 0 || self.surrogate_subset > self.data.train_count {
            return Err(Error::Config(format!(
                "surrogate_subset {} must sit inside the training set of {}",
                self.surrogate_subset, self.data.train_count
            )));
        }
        if self.eval_test_pairs == 0 || self.eval_sweep_pairs == 0 {
            return Err(Error::Config("evaluation pair counts must be positive".to_string()));
        }
        if self.baseline_hidden == 0 {
            return Err(Error::Config("baseline_hidden must be positive".to_string()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.data.dim,
            num_classes: self.data.num_classes,
            hidden: self.denoiser.hidden,
            time_emb_dim: self.denoiser.time_emb_dim,
            class_emb_dim: self.denoiser.class_emb_dim,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            dim: self.data.dim,
            num_classes: self.data.num_classes,
            hidden: self.baseline_hidden,
        }
    }

    fn eval_config(&self, pairs: usize) -> EvalConfig {
        EvalConfig {
            mode: EvalMode::Flat { pairs },
            strategy: self.plan_strategy,
            seed: self.seed,
        }
    }
}

/// Layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_csv(&self) -> PathBuf {
        self.data_dir().join("train.csv")
    }

    pub fn test_csv(&self) -> PathBuf {
        self.data_dir().join("test.csv")
    }

    pub fn val_csv(&self) -> PathBuf {
        self.data_dir().join("val.csv")
    }

    pub fn adv_csv(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("adv_{}.csv", split))
    }

    pub fn adv_provenance(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("adv_{}.provenance.json", split))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn diffusion_model(&self) -> PathBuf {
        self.models_dir().join("diffusion.tmdc")
    }

    pub fn surrogate_model(&self) -> PathBuf {
        self.models_dir().join("surrogate.tmdc")
    }

    pub fn adv_baseline_model(&self) -> PathBuf {
        self.models_dir().join("adv_baseline.tmdc")
    }

    pub fn tm_dir(&self) -> PathBuf {
        self.root.join("tm")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn eval_records(&self, name: &str) -> PathBuf {
        self.eval_dir().join(format!("{}.csv", name))
    }

    pub fn metrics_pre(&self) -> PathBuf {
        self.eval_dir().join("metrics_pre.json")
    }

    pub fn metrics_tm(&self) -> PathBuf {
        self.eval_dir().join("metrics_tm.json")
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.eval_dir().join("sweep.csv")
    }

    pub fn selection(&self) -> PathBuf {
        self.eval_dir().join("selected.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

const STAGE: &str = "run_experiment";

/// Generate and persist the train/test/val splits.
pub fn stage_gen_data(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    ensure_dir(&paths.data_dir())?;
    let (train, test) = gen_blobs(&cfg.data, cfg.seed).map_err(|e| e.at_stage(STAGE, "gen-data"))?;
    let val_start = train.len() - cfg.val_count;
    let val = train.slice(val_start, train.len())?;
    train.write_csv(&paths.train_csv())?;
    test.write_csv(&paths.test_csv())?;
    val.write_csv(&paths.val_csv())?;
    Ok(())
}

/// Train the conditional denoiser on the full training split.
pub fn stage_train_diffusion(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    ensure_dir(&paths.models_dir())?;
    let train = LabeledDataset::read_csv(&paths.train_csv())?;
    let sched = cfg.schedule.build()?;
    let mut model = Denoiser::new(
        cfg.denoiser_config(),
        &mut RngStream::new(cfg.seed, compose(&[domains::INIT, 0])),
    )?;
    train_base(&mut model, &sched, &train, &cfg.diffusion_train, cfg.seed)
        .map_err(|e| e.at_stage(STAGE, "train-diffusion"))?;
    save_denoiser(&model, &paths.diffusion_model())
}

/// Train the transfer surrogate on the head of the training split.
pub fn stage_train_surrogate(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    ensure_dir(&paths.models_dir())?;
    let train = LabeledDataset::read_csv(&paths.train_csv())?;
    let subset = train.slice(0, cfg.surrogate_subset)?;
    let mut model = DiscriminativeModel::new(
        cfg.baseline_config(),
        &mut RngStream::new(cfg.seed, compose(&[domains::INIT, 1])),
    )?;
    train_discriminative(&mut model, &subset, &cfg.surrogate_train, cfg.seed)
        .map_err(|e| e.at_stage(STAGE, "train-baseline"))?;
    save_baseline(&model, &paths.surrogate_model())
}

/// Adversarially train a fresh baseline on the full training split.
pub fn stage_adv_train_baseline(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    ensure_dir(&paths.models_dir())?;
    let train = LabeledDataset::read_csv(&paths.train_csv())?;
    let mut model = DiscriminativeModel::new(
        cfg.baseline_config(),
        &mut RngStream::new(cfg.seed, compose(&[domains::INIT, 2])),
    )?;
    adversarial_train(&mut model, &train, &cfg.adv_train, &cfg.adv_train_attack, cfg.seed)
        .map_err(|e| e.at_stage(STAGE, "adv-train-baseline"))?;
    save_baseline(&model, &paths.adv_baseline_model())
}

/// Attack every split with PGD against the surrogate and persist the
/// adversarial sets with their provenance. The TM training set comes from
/// the training head (the validation tail stays out of it).
pub fn stage_gen_attacks(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let surrogate = load_baseline(&paths.surrogate_model())?;
    let surrogate_sha = sha256_file(&paths.surrogate_model())?;
    let obj = DiscriminativeObjective { model: &surrogate };
    let test = LabeledDataset::read_csv(&paths.test_csv())?;
    let train = LabeledDataset::read_csv(&paths.train_csv())?;
    let val = LabeledDataset::read_csv(&paths.val_csv())?;
    let tm_train = train.slice(0, train.len() - cfg.val_count)?;
    let jobs: [(&str, &LabeledDataset, u64); 3] = [
        ("test", &test, compose(&[cfg.seed, domains::ATTACK, 0])),
        ("train", &tm_train, compose(&[cfg.seed, domains::ATTACK, 1])),
        ("val", &val, compose(&[cfg.seed, domains::ATTACK, 2])),
    ];
    for (split, data, seed) in jobs {
        let (adv, provenance) = gen_adv_dataset(&obj, data, &cfg.transfer_attack, seed, &surrogate_sha)
            .map_err(|e| e.at_stage(STAGE, format!("gen-attack {}", split)))?;
        adv.write_csv(&paths.adv_csv(split))?;
        write_json(&paths.adv_provenance(split), &provenance)?;
    }
    Ok(())
}

fn eval_diffusion(
    model: &Denoiser,
    sched: &NoiseSchedule<f64>,
    data: &LabeledDataset,
    cfg: &EvalConfig,
    paths: &RunPaths,
    name: &str,
) -> Result<f64> {
    let outcome = evaluate(model, sched, data, cfg)
        .map_err(|e| e.at_stage(STAGE, format!("eval {}", name)))?;
    write_eval_csv(&paths.eval_records(name), &outcome.records, data.num_classes())?;
    Ok(outcome.accuracy)
}

/// Score the surrogate, the adversarially trained baseline, and the base
/// diffusion classifier on the clean and adversarial test sets.
pub fn stage_eval_pre(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<MetricRow>> {
    ensure_dir(&paths.eval_dir())?;
    let test = LabeledDataset::read_csv(&paths.test_csv())?;
    let adv_test = LabeledDataset::read_csv(&paths.adv_csv("test"))?;
    let surrogate = load_baseline(&paths.surrogate_model())?;
    let adv_baseline = load_baseline(&paths.adv_baseline_model())?;
    let diffusion = load_denoiser(&paths.diffusion_model())?;
    let sched = cfg.schedule.build()?;
    let eval_cfg = cfg.eval_config(cfg.eval_test_pairs);
    let row = |model: &str, attack: &str, accuracy: f64| MetricRow {
        model: model.to_string(),
        attack: attack.to_string(),
        accuracy,
    };
    let rows = vec![
        row("surrogate", "none", surrogate.accuracy(&test)?),
        row("surrogate", "transfer_pgd", surrogate.accuracy(&adv_test)?),
        row("adv_trained", "none", adv_baseline.accuracy(&test)?),
        row("adv_trained", "transfer_pgd", adv_baseline.accuracy(&adv_test)?),
        row(
            "diffusion",
            "none",
            eval_diffusion(&diffusion, &sched, &test, &eval_cfg, paths, "diffusion_clean")?,
        ),
        row(
            "diffusion",
            "transfer_pgd",
            eval_diffusion(&diffusion, &sched, &adv_test, &eval_cfg, paths, "diffusion_adv")?,
        ),
    ];
    write_json(&paths.metrics_pre(), &rows)?;
    Ok(rows)
}

/// Attach adapters to the trained denoiser and fine-tune them on the
/// adversarial training set.
pub fn stage_tm_finetune(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let adv_train = LabeledDataset::read_csv(&paths.adv_csv("train"))?;
    let sched = cfg.schedule.build()?;
    let mut model = load_denoiser(&paths.diffusion_model())?;
    attach_lora(
        &mut model,
        &cfg.tm.lora,
        &mut RngStream::new(cfg.seed, compose(&[domains::INIT, 3])),
    )?;
    tm_finetune(&mut model, &sched, &adv_train, &cfg.tm, &paths.tm_dir(), cfg.seed)
        .map_err(|e| e.at_stage(STAGE, "tm-finetune"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SelectionRecord {
    step: usize,
    path: String,
    rows: Vec<SweepRow>,
}

/// Sweep the TM checkpoints on the adversarial validation set and persist
/// the winner.
pub fn stage_select(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Selection> {
    ensure_dir(&paths.eval_dir())?;
    let adv_val = LabeledDataset::read_csv(&paths.adv_csv("val"))?;
    let sched = cfg.schedule.build()?;
    let candidates = list_checkpoints(&paths.tm_dir())?;
    let eval_cfg = cfg.eval_config(cfg.eval_sweep_pairs);
    let selection = select_checkpoint(&candidates, &sched, &adv_val, &eval_cfg)
        .map_err(|e| e.at_stage(STAGE, "select-ckpt"))?;
    let mut sweep = String::from("step,robust_accuracy\n");
    for r in &selection.rows {
        sweep.push_str(&format!("{},{:.6}\n", r.step, r.robust_accuracy));
    }
    crate::checkpoint::write_atomic(&paths.sweep_csv(), sweep.as_bytes())?;
    write_json(
        &paths.selection(),
        &SelectionRecord {
            step: selection.step,
            path: selection.path.display().to_string(),
            rows: selection.rows.clone(),
        },
    )?;
    Ok(selection)
}

/// Score the selected TM checkpoint on the clean and adversarial test sets.
pub fn stage_eval_tm(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<MetricRow>> {
    let record: SelectionRecord = read_json_file(&paths.selection())?;
    let test = LabeledDataset::read_csv(&paths.test_csv())?;
    let adv_test = LabeledDataset::read_csv(&paths.adv_csv("test"))?;
    let sched = cfg.schedule.build()?;
    let model = load_denoiser(Path::new(&record.path))?;
    let eval_cfg = cfg.eval_config(cfg.eval_test_pairs);
    let rows = vec![
        MetricRow {
            model: "diffusion_tm".to_string(),
            attack: "none".to_string(),
            accuracy: eval_diffusion(&model, &sched, &test, &eval_cfg, paths, "tm_clean")?,
        },
        MetricRow {
            model: "diffusion_tm".to_string(),
            attack: "transfer_pgd".to_string(),
            accuracy: eval_diffusion(&model, &sched, &adv_test, &eval_cfg, paths, "tm_adv")?,
        },
    ];
    write_json(&paths.metrics_tm(), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub selected_step: usize,
    pub metrics: Vec<MetricRow>,
    /// Artifact name to path relative to the run root.
    pub artifacts: BTreeMap<String, String>,
}

/// Assemble the headline table, the summary report, and the manifest from
/// the persisted stage outputs.
pub fn stage_report(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<RunManifest> {
    let pre: Vec<MetricRow> = read_json_file(&paths.metrics_pre())?;
    let tm: Vec<MetricRow> = read_json_file(&paths.metrics_tm())?;
    let selection: SelectionRecord = read_json_file(&paths.selection())?;
    let mut metrics = pre;
    metrics.extend(tm);
    write_metrics_csv(&paths.metrics_csv(), &metrics)?;
    let config_value = serde_json::to_value(cfg)?;
    let report: RunReport = build_report(config_value.clone(), metrics.clone())?;
    write_json(&paths.report_json(), &report)?;
    let mut artifacts = BTreeMap::new();
    let mut add = |name: &str, p: PathBuf| {
        let rel = p
            .strip_prefix(&paths.root)
            .map(|r| r.display().to_string())
            .unwrap_or_else(|_| p.display().to_string());
        artifacts.insert(name.to_string(), rel);
    };
    add("config", paths.config());
    add("train", paths.train_csv());
    add("test", paths.test_csv());
    add("val", paths.val_csv());
    for split in ["test", "train", "val"] {
        add(&format!("adv_{}", split), paths.adv_csv(split));
        add(&format!("adv_{}_provenance", split), paths.adv_provenance(split));
    }
    add("diffusion_model", paths.diffusion_model());
    add("surrogate_model", paths.surrogate_model());
    add("adv_baseline_model", paths.adv_baseline_model());
    add("sweep", paths.sweep_csv());
    add("selection", paths.selection());
    add("metrics", paths.metrics_csv());
    add("report", paths.report_json());
    let manifest = RunManifest {
        run_id: run_id(&config_value)?,
        selected_step: selection.step,
        metrics,
        artifacts,
    };
    write_json(&paths.manifest(), &manifest)?;
    Ok(manifest)
}

/// The pipeline stages in execution order.
pub const STAGES: [&str; 9] = [
    "gen-data",
    "train-diffusion",
    "train-baseline",
    "adv-train-baseline",
    "gen-attack",
    "eval",
    "tm-finetune",
    "select-ckpt",
    "report",
];

/// Run one named stage. `eval` covers the pre-TM table, `report` also
/// evaluates the selected checkpoint before assembling the outputs.
pub fn run_stage(cfg: &ExperimentConfig, paths: &RunPaths, stage: &str) -> Result<()> {
    match stage {
        "gen-data" => stage_gen_data(cfg, paths),
        "train-diffusion" => stage_train_diffusion(cfg, paths),
        "train-baseline" => stage_train_surrogate(cfg, paths),
        "adv-train-baseline" => stage_adv_train_baseline(cfg, paths),
        "gen-attack" => stage_gen_attacks(cfg, paths),
        "eval" => stage_eval_pre(cfg, paths).map(|_| ()),
        "tm-finetune" => stage_tm_finetune(cfg, paths),
        "select-ckpt" => stage_select(cfg, paths).map(|_| ()),
        "report" => {
            stage_eval_tm(cfg, paths)?;
            stage_report(cfg, paths).map(|_| ())
        }
        other => Err(Error::Config(format!(
            "unknown stage {:?}; expected one of {:?}",
            other, STAGES
        ))),
    }
}

/// Run the whole pipeline into `root` and return the manifest.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let paths = RunPaths::new(root);
    ensure_dir(root)?;
    write_json(&paths.config(), cfg)?;
    for stage in STAGES {
        run_stage(cfg, &paths, stage)?;
    }
    read_json_file(&paths.manifest())
}
