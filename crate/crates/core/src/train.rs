//! DP-SGD with a Wasserstein fairness penalty.
//!
//! Each step draws a fixed-size batch from every class without replacement,
//! assembles the clipped penalized gradient, adds Gaussian noise calibrated to
//! the objective's sensitivity at the realized batch sizes, and takes a plain
//! SGD step. The accountant advances once per step.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{centered_target, fmt_f64, partition, BiasedDataset, PartitionMode};
use crate::dp_gradient::{
    clip_vector, clipped_wasserstein_grad, eo_objective_grad, sp_objective_grad, ClipConfig, LabeledBatch,
    ObjectiveGrad,
};
use crate::error::{invalid, Error, Result};
use crate::models::{sigmoid, Architecture, LossKind, ModelHandle, OutputActivation, ParametricMap};
use crate::privacy::{calibrate_noise, AccountantState, PrivacyBudget, ACCOUNTANT_FORMULA};
use crate::rng;
use crate::sensitivity::{bound_eo, bound_sp, bound_two_sided};
use crate::sliced::{dot, sample_directions, sample_directions_at_step, ProjectionSet};
use crate::transport::w2_squared;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ClassificationSp,
    ClassificationEo,
    RegressionSp,
    AutoencoderSp,
    Generation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::ClassificationSp => "classification_sp",
            Self::ClassificationEo => "classification_eo",
            Self::RegressionSp => "regression_sp",
            Self::AutoencoderSp => "autoencoder_sp",
            Self::Generation => "generation",
        }
    }

    fn loss(self) -> LossKind {
        match self {
            Self::ClassificationSp | Self::ClassificationEo => LossKind::Bce,
            Self::RegressionSp => LossKind::SquaredError,
            Self::AutoencoderSp | Self::Generation => LossKind::Reconstruction,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::ClassificationSp,
            Self::ClassificationEo,
            Self::RegressionSp,
            Self::AutoencoderSp,
            Self::Generation,
        ]
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| invalid(format!("unknown task '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: u64,
    pub learning_rate: f64,
    pub alpha: f64,
    pub clip: ClipConfig,
    /// Target `ε`; `None` trains without noise.
    pub epsilon: Option<f64>,
    /// Target `δ`; `None` means `0.1 / n`.
    pub delta: Option<f64>,
    /// Per-class batch size is `floor(n_j / batch_divisor)` unless `batch_sizes` is set.
    pub batch_divisor: usize,
    pub batch_sizes: Option<Vec<usize>>,
    /// Monte-Carlo directions for multidimensional outputs.
    pub num_directions: usize,
    /// Draw new directions every step instead of once per run.
    pub resample_directions: bool,
    pub hidden: usize,
    pub latent: usize,
    /// Overrides the task's default model.
    pub architecture: Option<Architecture>,
    /// Samples per side for the generation task.
    pub generation_samples: usize,
    /// Norm clip applied to the noisy gradient before the update.
    pub post_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults of the desk-scale experiments for each task.
    pub fn for_task(task: Task) -> Self {
        let sqrt2 = std::f64::consts::SQRT_2;
        let base = Self {
            task,
            steps: 500,
            learning_rate: 0.05,
            alpha: 0.75,
            clip: ClipConfig {
                activation: 1.0,
                jacobian_g: 1.0,
                jacobian_h: 1.0,
                loss_grad: 5.0,
            },
            epsilon: None,
            delta: None,
            batch_divisor: 5,
            batch_sizes: None,
            num_directions: 50,
            resample_directions: false,
            hidden: 64,
            latent: 2,
            architecture: None,
            generation_samples: 2000,
            post_clip: None,
            seed: 0,
        };
        match task {
            Task::ClassificationSp | Task::ClassificationEo => base,
            Task::RegressionSp => Self {
                steps: 1000,
                clip: ClipConfig {
                    activation: 1.0 / sqrt2,
                    jacobian_g: sqrt2,
                    jacobian_h: sqrt2,
                    loss_grad: 10.0,
                },
                ..base
            },
            Task::AutoencoderSp => Self {
                learning_rate: 0.01,
                hidden: 62,
                clip: ClipConfig {
                    activation: 2.0,
                    jacobian_g: sqrt2,
                    jacobian_h: sqrt2,
                    loss_grad: 10.0,
                },
                ..base
            },
            Task::Generation => Self {
                steps: 200,
                learning_rate: 0.0075,
                alpha: 1.0,
                clip: ClipConfig {
                    activation: 1.0,
                    jacobian_g: 2.0 * sqrt2,
                    jacobian_h: 2.0 * sqrt2,
                    loss_grad: 0.0,
                },
                post_clip: Some(1.0),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.steps == 0 {
            bad.push("steps must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bad.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if let Err(e) = self.clip.validate() {
            bad.push(format!("clip: {e}"));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                bad.push(format!("epsilon must be positive, got {eps}"));
            }
        }
        if let Some(delta) = self.delta {
            if !(delta > 0.0 && delta < 1.0) {
                bad.push(format!("delta must lie in (0, 1), got {delta}"));
            }
        }
        if self.batch_divisor == 0 {
            bad.push("batch_divisor must be >= 1".into());
        }
        if self.num_directions == 0 {
            bad.push("num_directions must be >= 1".into());
        }
        if self.hidden == 0 {
            bad.push("hidden must be >= 1".into());
        }
        if self.latent == 0 {
            bad.push("latent must be >= 1".into());
        }
        if self.task == Task::Generation && self.generation_samples < 2 {
            bad.push("generation_samples must be >= 2".into());
        }
        if let Some(c) = self.post_clip {
            if !(c > 0.0) {
                bad.push(format!("post_clip must be positive, got {c}"));
            }
        }
        if self.task == Task::Generation && self.alpha != 1.0 {
            bad.push("generation has no empirical-risk term; alpha must be 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn is_private(&self) -> bool {
        self.epsilon.is_some_and(f64::is_finite)
    }

    pub fn architecture_for(&self, input_dim: usize) -> Architecture {
        if let Some(a) = &self.architecture {
            return a.clone();
        }
        match self.task {
            Task::ClassificationSp | Task::ClassificationEo => Architecture::AffineSigmoid { input_dim },
            Task::RegressionSp => Architecture::Mlp2 {
                input_dim,
                hidden: self.hidden,
                output_dim: 2,
                output: OutputActivation::CenteredSigmoid,
            },
            Task::AutoencoderSp => Architecture::Autoencoder {
                input_dim,
                hidden: self.hidden,
                latent: self.latent,
            },
            Task::Generation => Architecture::Mlp2 {
                input_dim: 2,
                hidden: self.hidden,
                output_dim: 2,
                output: OutputActivation::Linear,
            },
        }
    }
}

/// Uniform draw without replacement of `sizes[c]` indices from each class.
pub fn subsample_partitioned<R: Rng>(classes: &[Vec<usize>], sizes: &[usize], rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if classes.len() != sizes.len() {
        return Err(invalid(format!(
            "{} batch sizes given for {} classes",
            sizes.len(),
            classes.len()
        )));
    }
    classes
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(c, (class, &size))| {
            if size > class.len() {
                return Err(invalid(format!(
                    "class {c}: batch size {size} exceeds class size {}",
                    class.len()
                )));
            }
            Ok(index::sample(rng, class.len(), size).into_iter().map(|i| class[i]).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub erm_loss: f64,
    pub w_loss: f64,
    pub total: f64,
    /// `None` for non-private runs.
    pub epsilon_spent: Option<f64>,
}

/// Named evaluation metrics; `None` marks an undefined ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable(pub BTreeMap<String, Option<f64>>);

impl MetricTable {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied().flatten()
    }

    fn set(&mut self, name: &str, v: Option<f64>) {
        self.0.insert(name.to_string(), v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub task: Task,
    pub config: TrainConfig,
    pub n_train: usize,
    pub class_sizes: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub sampling_rate: f64,
    pub sensitivity: f64,
    pub private: bool,
    pub target: Option<PrivacyBudget>,
    pub noise_multiplier: Option<f64>,
    pub sigma: f64,
    pub mu: Option<f64>,
    pub spent: Option<PrivacyBudget>,
    pub accountant_formula: String,
    pub steps: Vec<StepRecord>,
    pub model: ModelHandle,
    pub metrics: Option<MetricTable>,
}

impl TrainRecord {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.total)
    }
}

struct Problem {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    classes: Vec<Vec<usize>>,
}

fn targets_for(ds: &BiasedDataset, task: Task) -> Vec<Vec<f64>> {
    ds.records
        .iter()
        .map(|r| match task {
            Task::ClassificationSp | Task::ClassificationEo => vec![f64::from(r.y)],
            Task::RegressionSp => centered_target(r.yc).to_vec(),
            Task::AutoencoderSp | Task::Generation => r.x.clone(),
        })
        .collect()
}

fn class_label(task: Task, c: usize) -> String {
    match task {
        Task::ClassificationEo => format!("a={},y={}", c / 2, c % 2),
        Task::Generation => ["x", "z"][c].to_string(),
        _ => format!("a={c}"),
    }
}

fn biased_problem(cfg: &TrainConfig, ds: &BiasedDataset) -> Result<Problem> {
    if ds.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mode = if cfg.task == Task::ClassificationEo {
        PartitionMode::ByAAndY
    } else {
        PartitionMode::ByA
    };
    Ok(Problem {
        inputs: ds.features(),
        targets: targets_for(ds, cfg.task),
        classes: partition(ds, mode).indices,
    })
}

/// Standard Gaussian inputs and uniform points on the circle of radius 3/4.
pub fn generation_samples(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = rng::stream(seed, rng::streams::GENERATION);
    let x = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            vec![a, b]
        })
        .collect();
    let z = (0..n)
        .map(|_| {
            let t = rng.random::<f64>() * 2.0 * PI;
            vec![0.75 * t.cos(), 0.75 * t.sin()]
        })
        .collect();
    (x, z)
}

fn batch_sizes(cfg: &TrainConfig, classes: &[Vec<usize>]) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = match &cfg.batch_sizes {
        Some(b) => b.clone(),
        None => classes.iter().map(|c| c.len() / cfg.batch_divisor).collect(),
    };
    if sizes.len() != classes.len() {
        return Err(invalid(format!(
            "{} batch sizes given for {} classes",
            sizes.len(),
            classes.len()
        )));
    }
    for (c, (&b, class)) in sizes.iter().zip(classes).enumerate() {
        let label = class_label(cfg.task, c);
        if class.is_empty() {
            return Err(invalid(format!("class {label} is empty")));
        }
        if b == 0 {
            return Err(invalid(format!(
                "class {label} of size {} yields an empty batch",
                class.len()
            )));
        }
        if b > class.len() {
            return Err(invalid(format!(
                "class {label}: batch size {b} exceeds class size {}",
                class.len()
            )));
        }
    }
    Ok(sizes)
}

fn gather(rows: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// Runs DP-SGD for `cfg.task` on `ds`.
///
/// The generation task ignores `ds` and draws its own Gaussian and circle
/// samples from the run seed.
pub fn dpsgd_train(cfg: &TrainConfig, ds: &BiasedDataset) -> Result<TrainRecord> {
    cfg.validate()?;
    let (problem, h) = if cfg.task == Task::Generation {
        let n = cfg.generation_samples;
        let (x, z) = generation_samples(n, cfg.seed);
        let mut inputs = x;
        inputs.extend(z);
        let problem = Problem {
            targets: inputs.clone(),
            inputs,
            classes: vec![(0..n).collect(), (n..2 * n).collect()],
        };
        (problem, Some(ModelHandle::new(Architecture::Identity { dim: 2 }, Vec::new())?))
    } else {
        (biased_problem(cfg, ds)?, None)
    };
    let input_dim = problem.inputs[0].len();
    let arch = cfg.architecture_for(input_dim);
    if arch.input_dim() != input_dim {
        return Err(invalid(format!(
            "architecture expects inputs of dimension {}, data has {input_dim}",
            arch.input_dim()
        )));
    }
    let mut model = ModelHandle::init(arch, cfg.seed)?;
    let class_sizes: Vec<usize> = problem.classes.iter().map(Vec::len).collect();
    let sizes = batch_sizes(cfg, &problem.classes)?;
    let sampling_rate = sizes
        .iter()
        .zip(&class_sizes)
        .map(|(&b, &n)| b as f64 / n as f64)
        .fold(0.0, f64::max);

    let clip = &cfg.clip;
    let lip = clip.jacobian_g.max(clip.jacobian_h);
    let sensitivity = match cfg.task {
        Task::ClassificationEo => bound_eo(clip.loss_grad, clip.activation, lip, &sizes, cfg.alpha, 2)?,
        Task::Generation => bound_two_sided(clip.activation, clip.jacobian_g, 0.0, sizes[0], sizes[1])?,
        _ => bound_sp(clip.loss_grad, clip.activation, lip, sizes[0], sizes[1], cfg.alpha)?,
    };

    let n_train: usize = class_sizes.iter().sum();
    let delta = cfg.delta.unwrap_or(0.1 / n_train as f64);
    let (target, calibration, mut accountant) = if cfg.is_private() {
        let target = PrivacyBudget::new(cfg.epsilon.expect("private run has epsilon"), delta)?;
        let cal = calibrate_noise(target, cfg.steps, sampling_rate, sensitivity)?;
        let acc = AccountantState::new(cal.noise_multiplier, sampling_rate, delta)?;
        (Some(target), Some(cal), Some(acc))
    } else {
        (None, None, None)
    };
    let sigma = calibration.map_or(0.0, |c| c.sigma);

    let out_dim = model.output_dim();
    let sliced = out_dim > 1;
    let fixed_dirs = if sliced {
        Some(sample_directions(out_dim, cfg.num_directions, cfg.seed)?)
    } else {
        None
    };
    let loss = cfg.task.loss();

    let mut steps = Vec::with_capacity(cfg.steps as usize);
    for t in 0..cfg.steps {
        let mut sub_rng = rng::step_stream(cfg.seed, rng::streams::SUBSAMPLE, t);
        let batches = subsample_partitioned(&problem.classes, &sizes, &mut sub_rng)?;
        let step_dirs: Option<ProjectionSet> = if sliced && cfg.resample_directions {
            Some(sample_directions_at_step(out_dim, cfg.num_directions, cfg.seed, t)?)
        } else {
            None
        };
        let dirs = step_dirs.as_ref().or(fixed_dirs.as_ref());

        let obj = match &h {
            Some(h) => {
                let x = gather(&problem.inputs, &batches[0]);
                let z = gather(&problem.inputs, &batches[1]);
                let w = clipped_wasserstein_grad(&model, h, &x, &z, clip, dirs)?;
                ObjectiveGrad {
                    grad: w.grad,
                    erm_loss: 0.0,
                    wasserstein_loss: w.value,
                    total_loss: w.value,
                }
            }
            None => {
                let all: Vec<usize> = batches.concat();
                let erm_inputs = gather(&problem.inputs, &all);
                let erm_targets = gather(&problem.targets, &all);
                let erm = (cfg.alpha < 1.0).then_some(LabeledBatch {
                    inputs: &erm_inputs,
                    targets: &erm_targets,
                    loss,
                });
                let groups: Vec<Vec<Vec<f64>>> = batches.iter().map(|b| gather(&problem.inputs, b)).collect();
                if cfg.task == Task::ClassificationEo {
                    let pairs = vec![
                        (groups[0].clone(), groups[2].clone()),
                        (groups[1].clone(), groups[3].clone()),
                    ];
                    eo_objective_grad(&model, &pairs, erm, clip, cfg.alpha, dirs)?
                } else {
                    sp_objective_grad(&model, &groups[0], &groups[1], erm, clip, cfg.alpha, dirs)?
                }
            }
        };

        let mut noisy = crate::privacy::gaussian_mechanism(&obj.grad, sigma, cfg.seed, t)?;
        if let Some(c) = cfg.post_clip {
            noisy = clip_vector(&noisy, c);
        }
        model.descend(cfg.learning_rate, &noisy);
        if model.theta().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergent(format!("parameters diverged at step {}", t + 1)));
        }
        let epsilon_spent = match accountant.as_mut() {
            Some(acc) => {
                acc.step();
                Some(acc.epsilon()?)
            }
            None => None,
        };
        steps.push(StepRecord {
            step: t + 1,
            erm_loss: obj.erm_loss,
            w_loss: obj.wasserstein_loss,
            total: obj.total_loss,
            epsilon_spent,
        });
    }

    let spent = match (&accountant, target) {
        (Some(acc), Some(target)) => {
            let eps = acc.epsilon()?;
            if eps > target.epsilon * (1.0 + 1e-9) {
                return Err(Error::Saturated(format!(
                    "spent epsilon {eps} exceeds the target {}",
                    target.epsilon
                )));
            }
            Some(PrivacyBudget { epsilon: eps, delta })
        }
        _ => None,
    };

    Ok(TrainRecord {
        task: cfg.task,
        config: cfg.clone(),
        n_train,
        class_sizes,
        batch_sizes: sizes,
        sampling_rate,
        sensitivity,
        private: cfg.is_private(),
        target,
        noise_multiplier: calibration.map(|c| c.noise_multiplier),
        sigma,
        mu: calibration.map(|c| c.mu),
        spent,
        accountant_formula: ACCOUNTANT_FORMULA.to_string(),
        steps,
        model,
        metrics: None,
    })
}

fn rate(hits: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut k, mut n) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += usize::from(h);
    }
    (n > 0).then(|| k as f64 / n as f64)
}

fn ratio(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    match (num, den) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

/// `P(G=1 | A=0) / P(G=1 | A=1)`, undefined when a group is missing or never positive.
pub fn disparate_impact(decisions: &[bool], groups: &[u8]) -> Option<f64> {
    let p = |a: u8| rate(decisions.iter().zip(groups).filter(|(_, g)| **g == a).map(|(d, _)| *d));
    ratio(p(0), p(1))
}

/// Disparate impact restricted to records with label `k`.
pub fn equality_of_odds(decisions: &[bool], groups: &[u8], labels: &[u8], k: u8) -> Option<f64> {
    let (d, g): (Vec<bool>, Vec<u8>) = decisions
        .iter()
        .zip(groups)
        .zip(labels)
        .filter(|(_, y)| **y == k)
        .map(|((d, g), _)| (*d, *g))
        .unzip();
    disparate_impact(&d, &g)
}

/// Fraction of each group with `g2 > −g1`.
pub fn over_diagonal(outputs: &[Vec<f64>], groups: &[u8]) -> [Option<f64>; 2] {
    let f = |a: u8| {
        rate(outputs
            .iter()
            .zip(groups)
            .filter(|(_, g)| **g == a)
            .map(|(o, _)| o[1] > -o[0]))
    };
    [f(0), f(1)]
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluation metrics of a trained model on held-out data.
///
/// The generation task ignores `ds_test` and scores fresh samples instead.
pub fn metrics(ds_test: &BiasedDataset, model: &ModelHandle, cfg: &TrainConfig) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    if cfg.task == Task::Generation {
        let (x, z) = generation_samples(cfg.generation_samples, !cfg.seed);
        let gx = x.iter().map(|p| model.forward(p)).collect::<Result<Vec<_>>>()?;
        let dirs = sample_directions(2, cfg.num_directions, !cfg.seed)?;
        let mut sw = 0.0;
        for theta in dirs.directions() {
            let u: Vec<f64> = gx.iter().map(|p| dot(p, theta)).collect();
            let v: Vec<f64> = z.iter().map(|p| dot(p, theta)).collect();
            sw += w2_squared(&u, &v)?;
        }
        table.set("sw2", Some(sw / dirs.len() as f64));
        let radius = gx.iter().map(|p| dot(p, p).sqrt()).sum::<f64>() / gx.len() as f64;
        table.set("mean_radius", Some(radius));
        return Ok(table);
    }
    if ds_test.is_empty() {
        return Err(invalid("test set is empty"));
    }
    let groups: Vec<u8> = ds_test.records.iter().map(|r| r.a).collect();
    let labels: Vec<u8> = ds_test.records.iter().map(|r| r.y).collect();
    match cfg.task {
        Task::ClassificationSp | Task::ClassificationEo => {
            let decisions = ds_test
                .records
                .iter()
                .map(|r| Ok(model.forward(&r.x)?[0] > 0.5))
                .collect::<Result<Vec<bool>>>()?;
            table.set(
                "accuracy",
                rate(decisions.iter().zip(&labels).map(|(d, y)| *d == (*y == 1))),
            );
            table.set("di", disparate_impact(&decisions, &groups));
            table.set("eo0", equality_of_odds(&decisions, &groups, &labels, 0));
            table.set("eo1", equality_of_odds(&decisions, &groups, &labels, 1));
        }
        Task::RegressionSp => {
            let outputs = ds_test
                .records
                .iter()
                .map(|r| model.forward(&r.x))
                .collect::<Result<Vec<_>>>()?;
            let rl = outputs
                .iter()
                .zip(&ds_test.records)
                .map(|(o, r)| squared_distance(o, &centered_target(r.yc)))
                .sum::<f64>()
                / outputs.len() as f64;
            table.set("rl", Some(rl));
            table.set(
                "accuracy",
                rate(outputs.iter().zip(&labels).map(|(o, y)| (o[1] > -o[0]) == (*y == 1))),
            );
            let [od0, od1] = over_diagonal(&outputs, &groups);
            table.set("od0", od0);
            table.set("od1", od1);
        }
        Task::AutoencoderSp => {
            let d_core = ds_test.config.d_core;
            let mut rl = 0.0;
            let mut rl_core = 0.0;
            let mut codes = Vec::with_capacity(ds_test.len());
            for r in &ds_test.records {
                let rec = model.reconstruct(&r.x)?;
                rl += squared_distance(&rec, &r.x);
                rl_core += squared_distance(&rec[..d_core], &r.x[..d_core]);
                codes.push(model.forward(&r.x)?);
            }
            let n = ds_test.len() as f64;
            table.set("rl", Some(rl / n));
            table.set("rl_core", Some(rl_core / n));
            let probe = logistic_probe(&codes, &labels, &groups, cfg.seed)?;
            table.set("probe_accuracy", probe.0);
            table.set("probe_di", probe.1);
        }
        Task::Generation => unreachable!(),
    }
    Ok(table)
}

/// Logistic classifier fit on a random 60% of `codes` and scored on the rest.
/// Returns `(accuracy, disparate impact)` on the held-out part.
pub fn logistic_probe(codes: &[Vec<f64>], labels: &[u8], groups: &[u8], seed: u64) -> Result<(Option<f64>, Option<f64>)> {
    let n = codes.len();
    let split = n * 3 / 5;
    if split == 0 || split == n {
        return Ok((None, None));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::streams::PROBE));
    let (fit, eval) = order.split_at(split);
    let d = codes[0].len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in fit {
        for k in 0..d {
            mean[k] += codes[i][k] / split as f64;
        }
    }
    for &i in fit {
        for k in 0..d {
            sd[k] += (codes[i][k] - mean[k]).powi(2) / split as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let feat = |i: usize| -> Vec<f64> { (0..d).map(|k| (codes[i][k] - mean[k]) / sd[k]).collect() };
    let fit_x: Vec<Vec<f64>> = fit.iter().map(|&i| feat(i)).collect();
    let mut w = vec![0.0; d + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; d + 1];
        for (x, &i) in fit_x.iter().zip(fit) {
            let r = sigmoid(dot(&w[..d], x) + w[d]) - f64::from(labels[i]);
            for k in 0..d {
                g[k] += r * x[k];
            }
            g[d] += r;
        }
        for (wk, gk) in w.iter_mut().zip(&g) {
            *wk -= gk / split as f64;
        }
    }
    let decisions: Vec<bool> = eval.iter().map(|&i| sigmoid(dot(&w[..d], &feat(i)) + w[d]) > 0.5).collect();
    let eval_labels: Vec<u8> = eval.iter().map(|&i| labels[i]).collect();
    let eval_groups: Vec<u8> = eval.iter().map(|&i| groups[i]).collect();
    let acc = rate(decisions.iter().zip(&eval_labels).map(|(d, y)| *d == (*y == 1)));
    Ok((acc, disparate_impact(&decisions, &eval_groups)))
}

pub fn write_steps_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "erm_loss", "w_loss", "total", "epsilon_spent"])?;
    for s in steps {
        w.write_record([
            s.step.to_string(),
            fmt_f64(s.erm_loss),
            fmt_f64(s.w_loss),
            fmt_f64(s.total),
            s.epsilon_spent.map_or_else(|| "inf".to_string(), fmt_f64),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Model outputs per record, tagged with their class.
pub fn output_rows(ds: &BiasedDataset, model: &ModelHandle, cfg: &TrainConfig) -> Result<Vec<(String, Vec<f64>)>> {
    if cfg.task == Task::Generation {
        let (x, z) = generation_samples(cfg.generation_samples, !cfg.seed);
        let mut rows = x
            .iter()
            .map(|p| Ok(("x".to_string(), model.forward(p)?)))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(z.into_iter().map(|p| ("z".to_string(), p)));
        return Ok(rows);
    }
    ds.records
        .iter()
        .map(|r| {
            let class = if cfg.task == Task::ClassificationEo {
                format!("a={},y={}", r.a, r.y)
            } else {
                format!("a={}", r.a)
            };
            Ok((class, model.forward(&r.x)?))
        })
        .collect()
}

pub fn write_outputs_csv(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["class".to_string()];
    header.extend((1..=d).map(|k| format!("out_{k}")));
    w.write_record(&header)?;
    for (class, out) in rows {
        let mut row = vec![class.clone()];
        row.extend(out.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-class, per-coordinate histograms of the outputs over their common range.
pub fn write_histogram_csv(path: &Path, rows: &[(String, Vec<f64>)], bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut classes: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "coordinate", "bin_lower", "bin_upper", "count"])?;
    for k in 0..d {
        let lo = rows.iter().map(|r| r.1[k]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.1[k]).fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        for class in &classes {
            let mut counts = vec![0usize; bins];
            for r in rows.iter().filter(|r| r.0 == *class) {
                let b = (((r.1[k] - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                w.write_record([
                    class.to_string(),
                    (k + 1).to_string(),
                    fmt_f64(lo + b as f64 * width),
                    fmt_f64(lo + (b + 1) as f64 * width),
                    c.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_biased, BiasedConfig, Record};

    fn toy(n: usize, seed: u64) -> BiasedDataset {
        generate_biased(&BiasedConfig {
            n,
            seed,
            ..BiasedConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn subsample_whole_class_and_disjoint() {
        let classes = vec![vec![3, 5, 7], vec![0, 1, 2, 4, 6]];
        let mut rng = rng::stream(1, 0);
        let b = subsample_partitioned(&classes, &[3, 2], &mut rng).unwrap();
        let mut whole = b[0].clone();
        whole.sort_unstable();
        assert_eq!(whole, vec![3, 5, 7]);
        assert_eq!(b[1].len(), 2);
        assert_ne!(b[1][0], b[1][1]);
        assert!(b[1].iter().all(|i| classes[1].contains(i)));
        assert!(subsample_partitioned(&classes, &[4, 1], &mut rng).is_err());
        assert!(subsample_partitioned(&classes, &[1], &mut rng).is_err());
    }

    #[test]
    fn subsample_frequencies_are_uniform() {
        let classes = vec![(0..10).collect::<Vec<_>>()];
        let mut rng = rng::stream(2, 0);
        let draws = 20_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[subsample_partitioned(&classes, &[1], &mut rng).unwrap()[0][0]] += 1;
        }
        let expected = draws as f64 / 10.0;
        let sd = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn metric_examples() {
        let groups = [0, 0, 1, 1];
        assert_eq!(disparate_impact(&[true, false, true, false], &groups), Some(1.0));
        assert_eq!(disparate_impact(&[true, true, false, false], &groups), None);
        assert_eq!(disparate_impact(&[true], &[0]), None);
        assert_eq!(equality_of_odds(&[true, false, true, true], &groups, &[1, 1, 1, 0], 1), Some(0.5));
        let od = over_diagonal(&[vec![0.1, 0.0], vec![-0.1, 0.0]], &[0, 1]);
        assert_eq!(od, [Some(1.0), Some(0.0)]);
    }

    #[test]
    fn regression_oracle_matches_mixture_weights() {
        let ds = toy(20_000, 4);
        let outputs: Vec<Vec<f64>> = ds.records.iter().map(|r| centered_target(r.yc).to_vec()).collect();
        let groups: Vec<u8> = ds.records.iter().map(|r| r.a).collect();
        let [od0, od1] = over_diagonal(&outputs, &groups);
        assert!((od0.unwrap() - 0.3).abs() < 0.02);
        assert!((od1.unwrap() - 0.7).abs() < 0.02);
    }

    #[test]
    fn config_validation_lists_fields() {
        let cfg = TrainConfig {
            steps: 0,
            learning_rate: -1.0,
            alpha: 2.0,
            ..TrainConfig::for_task(Task::ClassificationSp)
        };
        match cfg.validate() {
            Err(Error::Validation(fields)) => assert_eq!(fields.len(), 3),
            other => panic!("{other:?}"),
        }
        assert_eq!("regression_sp".parse::<Task>().unwrap(), Task::RegressionSp);
        assert!("nope".parse::<Task>().is_err());
    }

    fn record(x: [f64; 2], a: u8, y: u8) -> Record {
        let yc = if y == 1 { [0.9, 0.9] } else { [0.1, 0.1] };
        let mut xs = x.to_vec();
        xs.extend([0.0, 0.0]);
        Record { x: xs, a, y, yc }
    }

    fn six_points() -> BiasedDataset {
        let config = BiasedConfig {
            n: 6,
            d_core: 2,
            d_sp: 2,
            ..BiasedConfig::default()
        };
        BiasedDataset {
            config,
            records: vec![
                record([0.2, -0.1], 0, 0),
                record([0.5, 0.3], 0, 1),
                record([-0.4, 0.8], 0, 1),
                record([1.0, 0.2], 1, 1),
                record([0.1, -0.6], 1, 0),
                record([0.7, 0.9], 1, 0),
            ],
        }
    }

    #[test]
    fn one_full_batch_step_matches_hand_computation() {
        let ds = six_points();
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.3,
            alpha: 0.4,
            clip: ClipConfig::new(10.0, 100.0, 100.0, 100.0).unwrap(),
            batch_sizes: Some(vec![3, 3]),
            seed: 11,
            ..TrainConfig::for_task(Task::ClassificationSp)
        };
        let rec = dpsgd_train(&cfg, &ds).unwrap();
        let theta0 = ModelHandle::init(Architecture::AffineSigmoid { input_dim: 4 }, 11)
            .unwrap()
            .theta()
            .to_vec();

        // g(x) = s(w.x + b), dg/dθ = s(1-s)(x, 1)
        let eval = |x: &[f64]| {
            let z: f64 = theta0[..4].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + theta0[4];
            1.0 / (1.0 + (-z).exp())
        };
        let dg = |x: &[f64]| {
            let s = eval(x);
            let mut v: Vec<f64> = x.iter().map(|xi| s * (1.0 - s) * xi).collect();
            v.push(s * (1.0 - s));
            v
        };
        let mut erm = [0.0; 5];
        for r in &ds.records {
            let s = eval(&r.x);
            let res = s - f64::from(r.y);
            for k in 0..4 {
                erm[k] += res * r.x[k] / 6.0;
            }
            erm[4] += res / 6.0;
        }
        // equal group sizes: sorted matching, W2² = (1/3) Σ (u_(i) − v_(i))²
        let mut u: Vec<(f64, usize)> = (0..3).map(|i| (eval(&ds.records[i].x), i)).collect();
        let mut v: Vec<(f64, usize)> = (3..6).map(|i| (eval(&ds.records[i].x), i)).collect();
        u.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut pen = [0.0; 5];
        for ((uu, i), (vv, j)) in u.iter().zip(&v) {
            let (gi, gj) = (dg(&ds.records[*i].x), dg(&ds.records[*j].x));
            for k in 0..5 {
                pen[k] += 2.0 / 3.0 * (uu - vv) * (gi[k] - gj[k]);
            }
        }
        for k in 0..5 {
            let expected = theta0[k] - 0.3 * (0.6 * erm[k] + 0.4 * pen[k]);
            assert!((rec.model.theta()[k] - expected).abs() < 1e-12);
        }
        assert!(!rec.private);
        assert_eq!(rec.sigma, 0.0);
    }

    #[test]
    fn affine_regression_reaches_least_squares() {
        // y ≈ x·β + c with inputs x = (yc1 + e, yc2 + e', ...)
        let ds = toy(400, 6);
        let cfg = TrainConfig {
            steps: 3000,
            learning_rate: 0.1,
            alpha: 0.0,
            clip: ClipConfig::new(1e6, 1e6, 1e6, 1e6).unwrap(),
            batch_sizes: Some(vec![
                partition(&ds, PartitionMode::ByA).indices[0].len(),
                partition(&ds, PartitionMode::ByA).indices[1].len(),
            ]),
            architecture: Some(Architecture::Affine {
                input_dim: 16,
                output_dim: 2,
            }),
            num_directions: 1,
            ..TrainConfig::for_task(Task::RegressionSp)
        };
        let rec = dpsgd_train(&cfg, &ds).unwrap();
        // closed form via the normal equations, one output at a time
        let p = 17;
        let rows: Vec<Vec<f64>> = ds
            .records
            .iter()
            .map(|r| {
                let mut v = r.x.clone();
                v.push(1.0);
                v
            })
            .collect();
        for out in 0..2 {
            let mut a = vec![vec![0.0; p + 1]; p];
            for (row, r) in rows.iter().zip(&ds.records) {
                let t = centered_target(r.yc)[out];
                for i in 0..p {
                    for j in 0..p {
                        a[i][j] += row[i] * row[j];
                    }
                    a[i][p] += row[i] * t;
                }
            }
            for c in 0..p {
                let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
                a.swap(c, piv);
                for r in 0..p {
                    if r != c {
                        let f = a[r][c] / a[c][c];
                        for k in c..=p {
                            a[r][k] -= f * a[c][k];
                        }
                    }
                }
            }
            let beta: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
            let theta = rec.model.theta();
            for i in 0..16 {
                assert!((theta[out * 16 + i] - beta[i]).abs() < 1e-3, "out {out} coef {i}");
            }
            assert!((theta[32 + out] - beta[16]).abs() < 1e-3);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy(300, 1);
        let cfg = TrainConfig {
            steps: 20,
            epsilon: Some(2.0),
            seed: 9,
            ..TrainConfig::for_task(Task::ClassificationEo)
        };
        let a = dpsgd_train(&cfg, &ds).unwrap();
        let b = dpsgd_train(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        assert!(a.private && a.sigma > 0.0);
        let spent = a.spent.unwrap().epsilon;
        assert!(spent <= 2.0 && spent > 2.0 * (1.0 - 1e-4));
        let mut eps_prev = 0.0;
        for s in &a.steps {
            let e = s.epsilon_spent.unwrap();
            assert!(e >= eps_prev);
            eps_prev = e;
        }
    }

    #[test]
    fn empty_class_is_reported() {
        let ds = generate_biased(&BiasedConfig {
            n: 200,
            p: 1.0,
            ..BiasedConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            steps: 2,
            ..TrainConfig::for_task(Task::ClassificationEo)
        };
        let err = dpsgd_train(&cfg, &ds).unwrap_err().to_string();
        assert!(err.contains("empty"), "{err}");
    }

    #[test]
    fn other_tasks_run() {
        let ds = toy(200, 2);
        let test = toy(200, 3);
        for task in [Task::RegressionSp, Task::AutoencoderSp, Task::Generation] {
            let cfg = TrainConfig {
                steps: 5,
                hidden: 8,
                num_directions: 5,
                generation_samples: 100,
                epsilon: Some(1.0),
                resample_directions: task == Task::AutoencoderSp,
                ..TrainConfig::for_task(task)
            };
            let rec = dpsgd_train(&cfg, &ds).unwrap();
            assert_eq!(rec.steps.len(), 5);
            let m = metrics(&test, &rec.model, &cfg).unwrap();
            assert!(!m.0.is_empty());
        }
    }
}
