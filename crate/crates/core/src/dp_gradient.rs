//! Clipped Wasserstein gradients and the penalized fairness objectives.
//!
//! Model outputs are projected onto the ball of radius `M` and per-sample
//! Jacobians are clipped row by row to `L / sqrt(d)` before the closed-form
//! 1D gradient is chained through them. With those projections in place the
//! assembled gradient has bounded sensitivity regardless of the model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{Jacobian, LossKind, ModelHandle, ParametricMap};
use crate::sliced::{dot, ProjectionSet};
use crate::transport::{w2_grad, w2_squared};

/// Clipping constants: activation bound `M`, Jacobian bounds `L1` (for `g`)
/// and `L2` (for `h`), and per-sample loss-gradient bound `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub activation: f64,
    pub jacobian_g: f64,
    pub jacobian_h: f64,
    pub loss_grad: f64,
}

impl ClipConfig {
    pub fn new(activation: f64, jacobian_g: f64, jacobian_h: f64, loss_grad: f64) -> Result<Self> {
        let cfg = Self {
            activation,
            jacobian_g,
            jacobian_h,
            loss_grad,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shared Jacobian bound for the case `g = h`.
    pub fn symmetric(activation: f64, jacobian: f64, loss_grad: f64) -> Result<Self> {
        Self::new(activation, jacobian, jacobian, loss_grad)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.activation, self.jacobian_g, self.jacobian_h, self.loss_grad];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid(format!("clip bounds must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMode {
    /// Statistical parity: match output laws across `a`.
    Sp,
    /// Equality of odds: match output laws across `a` within each label.
    Eo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub alpha: f64,
    pub mode: FairnessMode,
    /// Number of label classes `R` (EO only).
    pub num_label_classes: usize,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.mode == FairnessMode::Eo && self.num_label_classes < 2 {
            return Err(invalid("equality of odds needs at least two label classes"));
        }
        Ok(())
    }
}

/// Scales `v` onto the ball of radius `bound` if it lies outside.
pub fn clip_vector(v: &[f64], bound: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    clip_in_place(&mut out, bound);
    out
}

fn clip_in_place(v: &mut [f64], bound: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > bound {
        let scale = bound / norm;
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

/// Clips each of the `d` rows to norm `bound / sqrt(d)`, which caps the
/// spectral norm at `bound`.
pub fn clip_jacobian_naive(jac: &Jacobian, bound: f64) -> Jacobian {
    let mut out = jac.clone();
    let rows = jac.rows();
    if rows == 0 {
        return out;
    }
    let row_bound = bound / (rows as f64).sqrt();
    for k in 0..rows {
        clip_in_place(out.row_mut(k), row_bound);
    }
    out
}

/// Clipped outputs and clipped Jacobians for one sample set.
struct ClippedSide {
    outputs: Vec<Vec<f64>>,
    jacobians: Option<Vec<Jacobian>>,
}

fn clip_side(map: &dyn ParametricMap, points: &[Vec<f64>], m: f64, l: f64, with_jacobian: bool) -> Result<ClippedSide> {
    let outputs = points
        .par_iter()
        .map(|x| map.forward(x).map(|y| clip_vector(&y, m)))
        .collect::<Result<Vec<_>>>()?;
    let jacobians = if with_jacobian && map.num_params() > 0 {
        Some(
            points
                .par_iter()
                .map(|x| map.jacobian(x).map(|j| clip_jacobian_naive(&j, l)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(ClippedSide { outputs, jacobians })
}

/// Gradient in `θ` of the clipped (sliced) `W_2^2`, with the loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct WassersteinGrad {
    pub grad: Vec<f64>,
    /// `W_2^2` (or its Monte-Carlo sliced estimate) of the clipped outputs.
    pub value: f64,
}

fn shared_param_dim(g: &dyn ParametricMap, h: &dyn ParametricMap) -> Result<usize> {
    let (pg, ph) = (g.num_params(), h.num_params());
    let dim = pg.max(ph);
    if (pg != 0 && pg != dim) || (ph != 0 && ph != dim) {
        return Err(invalid(format!(
            "g and h must share one parameter vector (got {pg} and {ph} parameters)"
        )));
    }
    Ok(dim)
}

fn check_shapes(g: &dyn ParametricMap, h: &dyn ParametricMap, x: &[Vec<f64>], z: &[Vec<f64>], dirs: Option<&ProjectionSet>) -> Result<()> {
    if x.is_empty() || z.is_empty() {
        return Err(invalid("wasserstein gradient needs non-empty samples on both sides"));
    }
    if g.output_dim() != h.output_dim() {
        return Err(invalid("g and h must have the same output dimension"));
    }
    match dirs {
        None if g.output_dim() != 1 => Err(invalid(
            "multi-dimensional outputs need a projection set (sliced gradient)",
        )),
        Some(d) if d.dim() != g.output_dim() => Err(invalid(format!(
            "directions live in R^{} but outputs in R^{}",
            d.dim(),
            g.output_dim()
        ))),
        _ => Ok(()),
    }
}

/// Per-sample coefficient `c_i` such that the gradient equals
/// `Σ_i c_i^T Jclip_g(x_i) + Σ_j c_j^T Jclip_h(z_j)`, plus the distance value.
fn output_space_coefficients(u: &[Vec<f64>], v: &[Vec<f64>], dirs: Option<&ProjectionSet>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    match dirs {
        None => {
            let u1: Vec<f64> = u.iter().map(|p| p[0]).collect();
            let v1: Vec<f64> = v.iter().map(|p| p[0]).collect();
            let g = w2_grad(&u1, &v1)?;
            Ok((
                g.grad_u.into_iter().map(|c| vec![c]).collect(),
                g.grad_v.into_iter().map(|c| vec![c]).collect(),
                g.value,
            ))
        }
        Some(dirs) => {
            let slices = dirs
                .directions()
                .par_iter()
                .map(|theta| {
                    let pu: Vec<f64> = u.iter().map(|p| dot(p, theta)).collect();
                    let pv: Vec<f64> = v.iter().map(|p| dot(p, theta)).collect();
                    w2_grad(&pu, &pv)
                })
                .collect::<Result<Vec<_>>>()?;
            let d = dirs.dim();
            let k = dirs.len() as f64;
            let mut cu = vec![vec![0.0; d]; u.len()];
            let mut cv = vec![vec![0.0; d]; v.len()];
            let mut value = 0.0;
            for (theta, s) in dirs.directions().iter().zip(&slices) {
                value += s.value;
                for (c, gi) in cu.iter_mut().zip(&s.grad_u) {
                    for (ck, tk) in c.iter_mut().zip(theta) {
                        *ck += gi * tk;
                    }
                }
                for (c, gj) in cv.iter_mut().zip(&s.grad_v) {
                    for (ck, tk) in c.iter_mut().zip(theta) {
                        *ck += gj * tk;
                    }
                }
            }
            for c in cu.iter_mut().chain(cv.iter_mut()) {
                c.iter_mut().for_each(|x| *x /= k);
            }
            Ok((cu, cv, value / k))
        }
    }
}

fn accumulate(grad: &mut [f64], coeffs: &[Vec<f64>], jacobians: &Option<Vec<Jacobian>>) {
    let Some(jacs) = jacobians else { return };
    for (c, jac) in coeffs.iter().zip(jacs) {
        for (k, &ck) in c.iter().enumerate() {
            if ck != 0.0 {
                for (g, j) in grad.iter_mut().zip(jac.row(k)) {
                    *g += ck * j;
                }
            }
        }
    }
}

/// Clipped gradient proxy of `W_2^2(g_θ # P_X, h_θ # P_Z)` in `θ`.
///
/// With `dirs = None` outputs must be scalar. Otherwise the gradient of the
/// Monte-Carlo sliced distance over `dirs` is returned. `‖grad‖ ≤ 4M(L1 + L2)`.
pub fn clipped_wasserstein_grad(
    g: &dyn ParametricMap,
    h: &dyn ParametricMap,
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    clip: &ClipConfig,
    dirs: Option<&ProjectionSet>,
) -> Result<WassersteinGrad> {
    clip.validate()?;
    check_shapes(g, h, x, z, dirs)?;
    let dim = shared_param_dim(g, h)?;
    let gs = clip_side(g, x, clip.activation, clip.jacobian_g, true)?;
    let hs = clip_side(h, z, clip.activation, clip.jacobian_h, true)?;
    let (cu, cv, value) = output_space_coefficients(&gs.outputs, &hs.outputs, dirs)?;
    let mut grad = vec![0.0; dim];
    accumulate(&mut grad, &cu, &gs.jacobians);
    accumulate(&mut grad, &cv, &hs.jacobians);
    Ok(WassersteinGrad { grad, value })
}

/// `W_2^2` (or sliced estimate) between the clipped outputs, without gradients.
pub fn clipped_wasserstein_value(
    g: &dyn ParametricMap,
    h: &dyn ParametricMap,
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    clip: &ClipConfig,
    dirs: Option<&ProjectionSet>,
) -> Result<f64> {
    check_shapes(g, h, x, z, dirs)?;
    let u = clip_side(g, x, clip.activation, 0.0, false)?.outputs;
    let v = clip_side(h, z, clip.activation, 0.0, false)?.outputs;
    match dirs {
        None => {
            let u1: Vec<f64> = u.iter().map(|p| p[0]).collect();
            let v1: Vec<f64> = v.iter().map(|p| p[0]).collect();
            w2_squared(&u1, &v1)
        }
        Some(dirs) => {
            let slices = dirs
                .directions()
                .par_iter()
                .map(|theta| {
                    let pu: Vec<f64> = u.iter().map(|p| dot(p, theta)).collect();
                    let pv: Vec<f64> = v.iter().map(|p| dot(p, theta)).collect();
                    w2_squared(&pu, &pv)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(slices.iter().sum::<f64>() / dirs.len() as f64)
        }
    }
}

/// Samples with per-sample targets for the empirical-risk term.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
    pub loss: LossKind,
}

/// Mean of per-sample loss gradients, each clipped to norm `C`, and the mean loss.
pub fn clipped_erm_grad(model: &ModelHandle, batch: LabeledBatch<'_>, bound: f64) -> Result<(Vec<f64>, f64)> {
    if batch.inputs.is_empty() {
        return Err(invalid("empirical-risk batch is empty"));
    }
    if batch.inputs.len() != batch.targets.len() {
        return Err(invalid("inputs and targets differ in length"));
    }
    let per_sample = batch
        .inputs
        .par_iter()
        .zip(batch.targets.par_iter())
        .map(|(x, t)| {
            let loss = model.loss(x, t, batch.loss)?;
            let grad = clip_vector(&model.loss_grad(x, t, batch.loss)?, bound);
            Ok((grad, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let mut grad = vec![0.0; model.theta().len()];
    let mut loss = 0.0;
    for (g, l) in &per_sample {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
        loss += l;
    }
    grad.iter_mut().for_each(|a| *a /= n);
    Ok((grad, loss / n))
}

/// Gradient and the three reported loss terms of a penalized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub grad: Vec<f64>,
    pub erm_loss: f64,
    pub wasserstein_loss: f64,
    pub total_loss: f64,
}

// For an autoencoder the penalty acts on the latent code, which is what its
// forward pass returns.
fn combine(alpha: f64, erm: Option<(Vec<f64>, f64)>, penalty: Option<Vec<f64>>, w_loss: f64, dim: usize) -> ObjectiveGrad {
    let mut grad = vec![0.0; dim];
    let mut erm_loss = 0.0;
    if let Some((g, l)) = erm {
        erm_loss = l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += (1.0 - alpha) * b;
        }
    }
    if let Some(p) = penalty {
        for (a, b) in grad.iter_mut().zip(&p) {
            *a += alpha * b;
        }
    }
    ObjectiveGrad {
        grad,
        erm_loss,
        wasserstein_loss: w_loss,
        total_loss: (1.0 - alpha) * erm_loss + alpha * w_loss,
    }
}

/// Statistical-parity objective
/// `(1 - α) · clipped ERM + α · clipped W_2^2(g # P_{X_0}, g # P_{X_1})`.
///
/// The ERM term is skipped when `α = 1` (pass `erm = None` then), and the
/// penalty gradient is skipped when `α = 0` (its value is still reported).
pub fn sp_objective_grad(
    model: &ModelHandle,
    group0: &[Vec<f64>],
    group1: &[Vec<f64>],
    erm: Option<LabeledBatch<'_>>,
    clip: &ClipConfig,
    alpha: f64,
    dirs: Option<&ProjectionSet>,
) -> Result<ObjectiveGrad> {
    check_alpha(alpha)?;
    if group0.is_empty() || group1.is_empty() {
        return Err(invalid("statistical parity needs non-empty batches for both groups"));
    }
    let erm_part = erm_term(model, erm, clip, alpha)?;
    let (penalty, w_loss) = if alpha > 0.0 {
        let w = clipped_wasserstein_grad(model, model, group0, group1, clip, dirs)?;
        (Some(w.grad), w.value)
    } else {
        (None, clipped_wasserstein_value(model, model, group0, group1, clip, dirs)?)
    };
    Ok(combine(alpha, erm_part, penalty, w_loss, model.theta().len()))
}

/// Equality-of-odds objective
/// `(1 - α) · clipped ERM + (α / R) Σ_k clipped W_2^2(g # P_{X_{0,k}}, g # P_{X_{1,k}})`.
///
/// `groups[k] = (X_{0,k}, X_{1,k})` for each of the `R ≥ 2` label classes.
pub fn eo_objective_grad(
    model: &ModelHandle,
    groups: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
    erm: Option<LabeledBatch<'_>>,
    clip: &ClipConfig,
    alpha: f64,
    dirs: Option<&ProjectionSet>,
) -> Result<ObjectiveGrad> {
    check_alpha(alpha)?;
    if groups.len() < 2 {
        return Err(invalid(format!(
            "equality of odds needs R >= 2 label classes, got {}",
            groups.len()
        )));
    }
    for (k, (g0, g1)) in groups.iter().enumerate() {
        if g0.is_empty() || g1.is_empty() {
            return Err(invalid(format!("empty batch for label class {k}")));
        }
    }
    let erm_part = erm_term(model, erm, clip, alpha)?;
    let r = groups.len() as f64;
    let dim = model.theta().len();
    let mut penalty = vec![0.0; dim];
    let mut w_loss = 0.0;
    for (g0, g1) in groups {
        if alpha > 0.0 {
            let w = clipped_wasserstein_grad(model, model, g0, g1, clip, dirs)?;
            for (a, b) in penalty.iter_mut().zip(&w.grad) {
                *a += b / r;
            }
            w_loss += w.value / r;
        } else {
            w_loss += clipped_wasserstein_value(model, model, g0, g1, clip, dirs)? / r;
        }
    }
    Ok(combine(alpha, erm_part, (alpha > 0.0).then_some(penalty), w_loss, dim))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn erm_term(model: &ModelHandle, erm: Option<LabeledBatch<'_>>, clip: &ClipConfig, alpha: f64) -> Result<Option<(Vec<f64>, f64)>> {
    match erm {
        Some(batch) => Ok(Some(clipped_erm_grad(model, batch, clip.loss_grad)?)),
        None if alpha < 1.0 => Err(invalid("an empirical-risk batch is required when alpha < 1")),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, OutputActivation};

    #[test]
    fn clip_vector_cases() {
        assert_eq!(clip_vector(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = clip_vector(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_vector(&[0.0, 0.0], 0.0), vec![0.0, 0.0]);
        assert_eq!(clip_vector(&[-5.0], 2.0), vec![-2.0]);
        assert_eq!(clip_vector(&[1.5], 2.0), vec![1.5]);
    }

    #[test]
    fn naive_jacobian_clip_in_one_dimension_is_vector_clip() {
        let jac = Jacobian::from_rows(vec![vec![3.0, 4.0, 12.0]]).unwrap();
        let clipped = clip_jacobian_naive(&jac, 2.0);
        assert_eq!(clipped.row(0), clip_vector(&[3.0, 4.0, 12.0], 2.0).as_slice());
        let small = Jacobian::from_rows(vec![vec![0.1, 0.1], vec![0.2, 0.0]]).unwrap();
        assert_eq!(clip_jacobian_naive(&small, 1.0), small);
    }

    #[test]
    fn clip_config_validation() {
        assert!(ClipConfig::new(1.0, -1.0, 0.0, 1.0).is_err());
        assert!(ClipConfig::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
        assert!(ClipConfig::symmetric(1.0, 1.0, 5.0).is_ok());
        let pen = PenaltyConfig {
            alpha: 0.5,
            mode: FairnessMode::Eo,
            num_label_classes: 1,
        };
        assert!(pen.validate().is_err());
        assert!(PenaltyConfig { alpha: 1.5, mode: FairnessMode::Sp, num_label_classes: 2 }.validate().is_err());
    }

    #[test]
    fn same_model_same_data_gives_zero() {
        let model = ModelHandle::init(Architecture::AffineSigmoid { input_dim: 2 }, 3).unwrap();
        let x = vec![vec![0.1, 0.2], vec![-1.0, 0.5], vec![0.7, -0.3]];
        let clip = ClipConfig::symmetric(1.0, 1.0, 1.0).unwrap();
        let w = clipped_wasserstein_grad(&model, &model, &x, &x, &clip, None).unwrap();
        assert!(w.grad.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(w.value, 0.0);
    }

    #[test]
    fn shape_errors() {
        let model = ModelHandle::init(
            Architecture::Mlp2 {
                input_dim: 2,
                hidden: 3,
                output_dim: 2,
                output: OutputActivation::CenteredSigmoid,
            },
            1,
        )
        .unwrap();
        let clip = ClipConfig::symmetric(1.0, 1.0, 1.0).unwrap();
        let x = vec![vec![0.0, 1.0]];
        assert!(clipped_wasserstein_grad(&model, &model, &x, &x, &clip, None).is_err());
        assert!(clipped_wasserstein_grad(&model, &model, &[], &x, &clip, None).is_err());
        let other = ModelHandle::init(Architecture::AffineSigmoid { input_dim: 2 }, 1).unwrap();
        let dirs = crate::sliced::sample_directions(1, 2, 0).unwrap();
        assert!(clipped_wasserstein_grad(&other, &model, &x, &x, &clip, Some(&dirs)).is_err());
    }

    #[test]
    fn eo_rejects_single_label_class_and_empty_batches() {
        let model = ModelHandle::init(Architecture::AffineSigmoid { input_dim: 1 }, 0).unwrap();
        let clip = ClipConfig::symmetric(1.0, 1.0, 1.0).unwrap();
        let x = vec![vec![0.5]];
        let one = vec![(x.clone(), x.clone())];
        assert!(eo_objective_grad(&model, &one, None, &clip, 1.0, None).is_err());
        let empty = vec![(x.clone(), x.clone()), (vec![], x.clone())];
        assert!(eo_objective_grad(&model, &empty, None, &clip, 1.0, None).is_err());
        assert!(sp_objective_grad(&model, &x, &[], None, &clip, 1.0, None).is_err());
        assert!(sp_objective_grad(&model, &x, &x, None, &clip, 0.5, None).is_err());
    }
}
