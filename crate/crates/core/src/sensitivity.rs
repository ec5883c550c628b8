//! Sensitivity bounds of the clipped gradients, a randomized auditor that
//! lower-bounds the true sensitivity, and the `W_p` counterexample.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp_gradient::{clipped_wasserstein_grad, eo_objective_grad, sp_objective_grad, ClipConfig, LabeledBatch};
use crate::error::{invalid, Error, Result};
use crate::models::{Architecture, Jacobian, LossKind, ModelHandle, OutputActivation, ParametricMap};
use crate::rng;
use crate::sliced::sample_directions;

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_nan() || v < 0.0 {
        return Err(invalid(format!("{name} must be >= 0, got {v}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `4M(3L1 + L2)/n`: only the data side has `n` samples that may change.
pub fn bound_one_sided(m: f64, l1: f64, l2: f64, n: usize) -> Result<f64> {
    check_nonneg("M", m)?;
    check_nonneg("L1", l1)?;
    check_nonneg("L2", l2)?;
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    Ok(4.0 * m * (3.0 * l1 + l2) / n as f64)
}

/// `4M max((3L1 + L2)/n, (L1 + 3L2)/m)`: either side may change.
pub fn bound_two_sided(m_bound: f64, l1: f64, l2: f64, n: usize, m: usize) -> Result<f64> {
    check_nonneg("M", m_bound)?;
    check_nonneg("L1", l1)?;
    check_nonneg("L2", l2)?;
    if n == 0 || m == 0 {
        return Err(invalid(format!("sample sizes must be >= 1, got n={n}, m={m}")));
    }
    let a = (3.0 * l1 + l2) / n as f64;
    let b = (l1 + 3.0 * l2) / m as f64;
    Ok(4.0 * m_bound * a.max(b))
}

/// Statistical-parity objective: `(1−α)2C/n + α·16ML/min(n0, n1)`, `n = n0 + n1`.
pub fn bound_sp(c: f64, m: f64, l: f64, n0: usize, n1: usize, alpha: f64) -> Result<f64> {
    check_nonneg("C", c)?;
    check_nonneg("M", m)?;
    check_nonneg("L", l)?;
    check_alpha(alpha)?;
    if n0 == 0 || n1 == 0 {
        return Err(invalid(format!("both groups must be non-empty, got n0={n0}, n1={n1}")));
    }
    let n = (n0 + n1) as f64;
    Ok((1.0 - alpha) * 2.0 * c / n + alpha * 16.0 * m * l / n0.min(n1) as f64)
}

/// Equality-of-odds objective over `R` label classes:
/// `(1−α)2C/n + (α/R)·16ML/min n_{j,k}`, `n = Σ n_{j,k}`.
pub fn bound_eo(c: f64, m: f64, l: f64, sizes: &[usize], alpha: f64, num_label_classes: usize) -> Result<f64> {
    check_nonneg("C", c)?;
    check_nonneg("M", m)?;
    check_nonneg("L", l)?;
    check_alpha(alpha)?;
    if num_label_classes < 2 {
        return Err(invalid(format!("need R >= 2 label classes, got {num_label_classes}")));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(invalid("every (group, label) class must be non-empty"));
    }
    let n: usize = sizes.iter().sum();
    let min = *sizes.iter().min().expect("non-empty") as f64;
    let r = num_label_classes as f64;
    Ok((1.0 - alpha) * 2.0 * c / n as f64 + alpha / r * 16.0 * m * l / min)
}

/// Replacement neighbors over `k` classes: two datasets are neighbors when
/// they differ in one record of one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborRelation {
    sizes: Vec<usize>,
}

impl NeighborRelation {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(invalid("neighbor relation needs k >= 1 classes, all non-empty"));
        }
        Ok(Self { sizes })
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub theoretical_bound: f64,
    pub empirical_max: f64,
    pub trials: usize,
    /// `empirical_max / theoretical_bound` (0 when the bound is 0 and nothing moved).
    pub ratio: f64,
}

impl SensitivityReport {
    pub fn within_bound(&self) -> bool {
        self.empirical_max <= self.theoretical_bound * (1.0 + 1e-12) + 1e-15
    }
}

/// Axis-aligned box from which replacement records are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(invalid("box bounds must be non-empty and of equal length"));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(invalid("box bounds must be finite with lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&a, &b)| if a == b { a } else { rng.random_range(a..=b) })
            .collect()
    }
}

/// Randomized lower bound on the `l2`-sensitivity of `gradient_fn`.
///
/// `base[c]` holds the records of class `c`. Each trial replaces one record of
/// a uniformly chosen class by a uniform draw from `domain` and measures
/// `‖grad(D) − grad(D̃)‖₂`. Trials run in parallel; each has its own stream.
pub fn empirical_sensitivity<F>(
    gradient_fn: F,
    base: &[Vec<Vec<f64>>],
    domain: &BoxDomain,
    trials: usize,
    seed: u64,
    theoretical_bound: f64,
) -> Result<SensitivityReport>
where
    F: Fn(&[Vec<Vec<f64>>]) -> Result<Vec<f64>> + Sync,
{
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    NeighborRelation::new(base.iter().map(Vec::len).collect())?;
    if base.iter().flatten().any(|r| r.len() != domain.dim()) {
        return Err(invalid(format!("records must have the domain dimension {}", domain.dim())));
    }
    let reference = gradient_fn(base)?;
    let diffs = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::step_stream(seed, rng::streams::AUDIT, t as u64);
            let class = rng.random_range(0..base.len());
            let idx = rng.random_range(0..base[class].len());
            let mut neighbor = base.to_vec();
            neighbor[class][idx] = domain.sample(&mut rng);
            let g = gradient_fn(&neighbor)?;
            if g.len() != reference.len() {
                return Err(invalid("gradient function changed its output length"));
            }
            Ok(reference
                .iter()
                .zip(&g)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let empirical_max = diffs.into_iter().fold(0.0, f64::max);
    let ratio = if theoretical_bound > 0.0 {
        empirical_max / theoretical_bound
    } else if empirical_max == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(SensitivityReport {
        theoretical_bound,
        empirical_max,
        trials,
        ratio,
    })
}

/// `g_θ(x) = x + θ` with `θ ∈ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    pub theta: Vec<f64>,
}

impl Shift {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(invalid("shift needs at least one coordinate"));
        }
        Ok(Self { theta })
    }
}

impl ParametricMap for Shift {
    fn input_dim(&self) -> usize {
        self.theta.len()
    }

    fn output_dim(&self) -> usize {
        self.theta.len()
    }

    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.theta.len() {
            return Err(invalid(format!("expected input of dimension {}", self.theta.len())));
        }
        Ok(x.iter().zip(&self.theta).map(|(a, b)| a + b).collect())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Jacobian> {
        let d = self.theta.len();
        if x.len() != d {
            return Err(invalid(format!("expected input of dimension {d}")));
        }
        let mut j = Jacobian::zeros(d, d);
        for k in 0..d {
            j.row_mut(k)[k] = 1.0;
        }
        Ok(j)
    }
}

/// Datasets of the `W_p` counterexample: `x_i = i/n`, `x̃_i = (i−1)/n`,
/// `z_i = (2i−1)/(2n)`.
pub fn counterexample_data(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let x = (1..=n).map(|i| i as f64 / nf).collect();
    let xt = (1..=n).map(|i| (i - 1) as f64 / nf).collect();
    let z = (1..=n).map(|i| (2 * i - 1) as f64 / (2.0 * nf)).collect();
    (x, xt, z)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `W_p(P_{X+θ}, P_Z)` for equal sizes.
pub fn wp_distance_shifted(x: &[f64], z: &[f64], theta: f64, p: f64) -> Result<f64> {
    if x.len() != z.len() || x.is_empty() {
        return Err(invalid("samples must be non-empty and of equal size"));
    }
    if !(p >= 1.0) {
        return Err(invalid(format!("order p must be >= 1, got {p}")));
    }
    let (xs, zs) = (sorted(x), sorted(z));
    let mean = xs.iter().zip(&zs).map(|(a, b)| (a + theta - b).abs().powf(p)).sum::<f64>() / x.len() as f64;
    Ok(mean.powf(1.0 / p))
}

/// `d/dθ W_p(P_{X+θ}, P_Z)` from the closed form
/// `(1/n Σ|d_i|^p)^{1/p − 1} · (1/n) Σ |d_i|^{p−1} sign(d_i)`, `d_i = x_(i) + θ − z_(i)`.
pub fn wp_derivative_shifted(x: &[f64], z: &[f64], theta: f64, p: f64) -> Result<f64> {
    let w = wp_distance_shifted(x, z, theta, p)?;
    if w == 0.0 {
        return Err(invalid("W_p is not differentiable where it vanishes"));
    }
    let (xs, zs) = (sorted(x), sorted(z));
    let n = x.len() as f64;
    let inner = xs
        .iter()
        .zip(&zs)
        .map(|(a, b)| {
            let d = a + theta - b;
            d.abs().powf(p - 1.0) * d.signum()
        })
        .sum::<f64>()
        / n;
    Ok(w.powf(1.0 - p) * inner)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub grad_x: f64,
    pub grad_xtilde: f64,
    pub gap: f64,
    /// Largest deviation between the closed form and a central difference.
    pub finite_difference_error: f64,
}

/// Derivatives at `θ = 0` of `W_p` for the two neighboring datasets.
pub fn wp_counterexample(n: usize, p_order: f64) -> Result<Counterexample> {
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    // the derivative is invariant under rescaling, so work on the integer
    // grid 2n·x where every |d_i| is exactly 1
    let x: Vec<f64> = (1..=n).map(|i| 2.0 * i as f64).collect();
    let xt: Vec<f64> = (1..=n).map(|i| 2.0 * (i - 1) as f64).collect();
    let z: Vec<f64> = (1..=n).map(|i| (2 * i - 1) as f64).collect();
    let grad_x = wp_derivative_shifted(&x, &z, 0.0, p_order)?;
    let grad_xtilde = wp_derivative_shifted(&xt, &z, 0.0, p_order)?;
    // the kinks sit at θ = ±1; the step stays well inside
    let h = 1e-3;
    let fd = |s: &[f64]| -> Result<f64> {
        Ok((wp_distance_shifted(s, &z, h, p_order)? - wp_distance_shifted(s, &z, -h, p_order)?) / (2.0 * h))
    };
    let err = (fd(&x)? - grad_x).abs().max((fd(&xt)? - grad_xtilde).abs());
    if !(err < 1e-6) {
        return Err(Error::NonConvergent(format!(
            "closed-form derivative disagrees with finite differences by {err:e}"
        )));
    }
    Ok(Counterexample {
        grad_x,
        grad_xtilde,
        gap: (grad_x - grad_xtilde).abs(),
        finite_difference_error: err,
    })
}

/// Clipped `W_2^2` gradient gap between the two neighboring datasets of the
/// counterexample, with the one-sided bound for `M = 1, L1 = 1, L2 = 0`.
pub fn w2_counterexample_gap(n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    let (x, xt, z) = counterexample_data(n);
    let g = Shift::new(vec![0.0])?;
    let h = ModelHandle::new(Architecture::Identity { dim: 1 }, Vec::new())?;
    let clip = ClipConfig::new(1.0, 1.0, 0.0, 0.0)?;
    let col = |v: &[f64]| v.iter().map(|a| vec![*a]).collect::<Vec<_>>();
    let zc = col(&z);
    let gx = clipped_wasserstein_grad(&g, &h, &col(&x), &zc, &clip, None)?.grad[0];
    let gxt = clipped_wasserstein_grad(&g, &h, &col(&xt), &zc, &clip, None)?.grad[0];
    Ok(((gx - gxt).abs(), bound_one_sided(1.0, 1.0, 0.0, n)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    /// Only the `n` data points may change; the `m` reference points are public.
    OneSided,
    /// Either side may change.
    TwoSided,
    /// Statistical-parity objective over two groups of sizes `n` and `m`.
    Sp,
    /// Equality-of-odds objective over four `(a, y)` classes of size `n`.
    Eo,
}

/// Randomized audit of one clipped gradient against its closed-form bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSetup {
    pub kind: AuditKind,
    pub activation: f64,
    pub l1: f64,
    pub l2: f64,
    /// Per-sample loss-gradient clip (objective audits only).
    pub loss_clip: f64,
    pub alpha: f64,
    pub n: usize,
    pub m: usize,
    /// Output dimension; above 1 the sliced estimate over `directions` is used.
    pub dim: usize,
    pub directions: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AuditSetup {
    fn default() -> Self {
        Self {
            kind: AuditKind::OneSided,
            activation: 1.0,
            l1: 1.0,
            l2: 1.0,
            loss_clip: 5.0,
            alpha: 0.75,
            n: 100,
            m: 100,
            dim: 1,
            directions: 20,
            trials: 1000,
            seed: 0,
        }
    }
}

impl AuditSetup {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("activation", self.activation),
            ("l1", self.l1),
            ("l2", self.l2),
            ("loss_clip", self.loss_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bad.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.n == 0 || self.m == 0 {
            bad.push(format!("n and m must be >= 1, got n={}, m={}", self.n, self.m));
        }
        if self.dim == 0 {
            bad.push("dim must be >= 1".into());
        }
        if self.directions == 0 {
            bad.push("directions must be >= 1".into());
        }
        if self.trials == 0 {
            bad.push("trials must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn bound(&self) -> Result<f64> {
        let l = self.l1.max(self.l2);
        match self.kind {
            AuditKind::OneSided => bound_one_sided(self.activation, self.l1, self.l2, self.n),
            AuditKind::TwoSided => bound_two_sided(self.activation, self.l1, self.l2, self.n, self.m),
            AuditKind::Sp => bound_sp(self.loss_clip, self.activation, l, self.n, self.m, self.alpha),
            AuditKind::Eo => bound_eo(self.loss_clip, self.activation, l, &[self.n; 4], self.alpha, 2),
        }
    }
}

/// Random two-layer map with weights large enough that clipping is active.
fn audit_model(input: usize, output: usize, seed: u64) -> Result<ModelHandle> {
    let arch = Architecture::Mlp2 {
        input_dim: input,
        hidden: 3,
        output_dim: output,
        output: OutputActivation::Linear,
    };
    let base = ModelHandle::init(arch.clone(), seed)?;
    ModelHandle::new(arch, base.theta().iter().map(|t| 3.0 * t).collect())
}

fn random_points<R: Rng>(rng: &mut R, count: usize, domain: &BoxDomain) -> Vec<Vec<f64>> {
    (0..count).map(|_| domain.sample(rng)).collect()
}

pub fn run_audit(setup: &AuditSetup) -> Result<SensitivityReport> {
    setup.validate()?;
    let d = setup.dim;
    let bound = setup.bound()?;
    let dirs = if d > 1 {
        Some(sample_directions(d, setup.directions, setup.seed)?)
    } else {
        None
    };
    let dirs = dirs.as_ref();
    let mut rng = rng::stream(setup.seed, rng::streams::DATA);
    let model = audit_model(d, d, setup.seed)?;
    let identity = ModelHandle::new(Architecture::Identity { dim: d }, Vec::new())?;
    let clip = ClipConfig::new(setup.activation, setup.l1, setup.l2, setup.loss_clip)?;
    let points = BoxDomain::cube(d, -1.5, 1.5)?;
    match setup.kind {
        AuditKind::OneSided | AuditKind::TwoSided => {
            let g: &ModelHandle = if setup.l1 > 0.0 { &model } else { &identity };
            let h: &ModelHandle = if setup.l2 > 0.0 { &model } else { &identity };
            let x = random_points(&mut rng, setup.n, &points);
            // a reference law distinct from the data law keeps the transport
            // gradient away from zero as the samples grow
            let z = random_points(&mut rng, setup.m, &BoxDomain::cube(d, 0.0, 1.5)?);
            let grad = |data: &[Vec<Vec<f64>>]| -> Result<Vec<f64>> {
                let zs = data.get(1).unwrap_or(&z);
                Ok(clipped_wasserstein_grad(g, h, &data[0], zs, &clip, dirs)?.grad)
            };
            let base = if setup.kind == AuditKind::OneSided { vec![x] } else { vec![x, z.clone()] };
            empirical_sensitivity(grad, &base, &points, setup.trials, setup.seed, bound)
        }
        AuditKind::Sp | AuditKind::Eo => {
            // records carry the label as an extra coordinate in [0, 1]
            let mut lower = vec![-1.5; d];
            let mut upper = vec![1.5; d];
            lower.push(0.0);
            upper.push(1.0);
            let domain = BoxDomain::new(lower, upper)?;
            let model = if d == 1 {
                let base = ModelHandle::init(Architecture::AffineSigmoid { input_dim: 1 }, setup.seed)?;
                ModelHandle::new(base.architecture().clone(), base.theta().iter().map(|t| 3.0 * t).collect())?
            } else {
                model
            };
            let loss = if d == 1 { LossKind::Bce } else { LossKind::SquaredError };
            let sizes = if setup.kind == AuditKind::Sp { vec![setup.n, setup.m] } else { vec![setup.n; 4] };
            let base: Vec<Vec<Vec<f64>>> = sizes.iter().map(|&s| random_points(&mut rng, s, &domain)).collect();
            let clip = ClipConfig::symmetric(setup.activation, setup.l1.max(setup.l2), setup.loss_clip)?;
            let alpha = setup.alpha;
            let grad = |data: &[Vec<Vec<f64>>]| -> Result<Vec<f64>> {
                let feats: Vec<Vec<Vec<f64>>> =
                    data.iter().map(|c| c.iter().map(|r| r[..d].to_vec()).collect()).collect();
                let all: Vec<Vec<f64>> = feats.concat();
                let targets: Vec<Vec<f64>> = data
                    .iter()
                    .flatten()
                    .map(|r| vec![if r[d] > 0.5 { 1.0 } else { 0.0 }; if d == 1 { 1 } else { d }])
                    .collect();
                let erm = (alpha < 1.0).then_some(LabeledBatch {
                    inputs: &all,
                    targets: &targets,
                    loss,
                });
                let obj = if feats.len() == 2 {
                    sp_objective_grad(&model, &feats[0], &feats[1], erm, &clip, alpha, dirs)?
                } else {
                    let pairs = vec![(feats[0].clone(), feats[2].clone()), (feats[1].clone(), feats[3].clone())];
                    eo_objective_grad(&model, &pairs, erm, &clip, alpha, dirs)?
                };
                Ok(obj.grad)
            };
            empirical_sensitivity(grad, &base, &domain, setup.trials, setup.seed, bound)
        }
    }
}
