//! Detector training losses with analytic gradients, plus a central finite
//! difference checker.
//!
//! | loss            | form                                                            |
//! |-----------------|-----------------------------------------------------------------|
//! | cross entropy   | `-Σ yᵢ ln pᵢ`                                                    |
//! | dice            | `1 - 2Σyᵢpᵢ / (Σyᵢ² + Σpᵢ²)`                                       |
//! | dual            | cross entropy + dice                                            |
//! | smooth L1       | `0.5·mae²/δ` if `mae < 1`, else `mae - 0.5·δ`                     |
//! | focal           | `-α(1-p)^γ ln p` for `y = 1`, `-(1-α)p^γ ln(1-p)` for `y = 0`      |
//!
//! Smooth L1 branches at `mae = 1` regardless of δ, so it is only continuous
//! for δ = 1 (the default).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Paired predictions and labels, validated once.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVector {
    p: Vec<f64>,
    y: Vec<f64>,
}

impl PredictionVector {
    pub fn new(p: &[f64], y: &[f64]) -> Result<Self> {
        if p.is_empty() || p.len() != y.len() {
            return Err(Error::input(format!(
                "prediction/label lengths must match and be >= 1 (got {} and {})",
                p.len(),
                y.len()
            )));
        }
        if let Some(v) = p.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::input(format!("probability {v} outside [0, 1]")));
        }
        if let Some(v) = y.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::input(format!("label {v} outside [0, 1]")));
        }
        Ok(PredictionVector {
            p: p.iter().map(|v| v.max(PROB_EPS)).collect(),
            y: y.to_vec(),
        })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.p
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegressionParams {
    pub delta: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for RegressionParams {
    fn default() -> Self {
        RegressionParams {
            delta: 1.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl RegressionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::input(format!("delta {} must be > 0", self.delta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::input(format!("alpha {} must be in (0, 1)", self.alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::input(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

fn ce_of(v: &PredictionVector) -> f64 {
    -v.y
        .iter()
        .zip(&v.p)
        .map(|(y, p)| if *y == 0.0 { 0.0 } else { y * p.ln() })
        .sum::<f64>()
}

fn dice_terms(y: &[f64], p: &[f64]) -> (f64, f64) {
    let inter: f64 = y.iter().zip(p).map(|(a, b)| a * b).sum();
    let norm: f64 = y.iter().map(|a| a * a).sum::<f64>() + p.iter().map(|b| b * b).sum::<f64>();
    (inter, norm)
}

pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    Ok(ce_of(&PredictionVector::new(p, y)?))
}

pub fn cross_entropy_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let v = PredictionVector::new(p, y)?;
    Ok(v.y.iter().zip(&v.p).map(|(y, p)| -y / p).collect())
}

/// Both masks all-zero counts as perfect agreement (loss 0).
pub fn dice_loss(y: &[f64], p: &[f64]) -> Result<f64> {
    let v = PredictionVector::new(p, y)?;
    let (inter, norm) = dice_terms(&v.y, p);
    if norm == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter / norm)
}

/// Gradient of [`dice_loss`] with respect to the predictions.
pub fn dice_loss_grad(y: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let v = PredictionVector::new(p, y)?;
    let (inter, norm) = dice_terms(&v.y, p);
    if norm == 0.0 {
        return Ok(vec![0.0; p.len()]);
    }
    Ok(v.y
        .iter()
        .zip(p)
        .map(|(yj, pj)| -2.0 * (yj * norm - 2.0 * inter * pj) / (norm * norm))
        .collect())
}

pub fn dual_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    Ok(cross_entropy(p, y)? + dice_loss(y, p)?)
}

pub fn dual_loss_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let a = cross_entropy_grad(p, y)?;
    let b = dice_loss_grad(y, p)?;
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

fn check_mae(mae: f64, delta: f64) -> Result<()> {
    if !(mae.is_finite() && mae >= 0.0) {
        return Err(Error::input(format!("mae {mae} must be >= 0")));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::input(format!("delta {delta} must be > 0")));
    }
    Ok(())
}

pub fn smooth_l1(mae: f64, delta: f64) -> Result<f64> {
    check_mae(mae, delta)?;
    Ok(if mae < 1.0 {
        0.5 * mae * mae / delta
    } else {
        mae - 0.5 * delta
    })
}

pub fn smooth_l1_grad(mae: f64, delta: f64) -> Result<f64> {
    check_mae(mae, delta)?;
    Ok(if mae < 1.0 { mae / delta } else { 1.0 })
}

fn focal_inputs(p: f64, y: u8, alpha: f64, gamma: f64) -> Result<f64> {
    if y > 1 {
        return Err(Error::input(format!("focal label must be 0 or 1, got {y}")));
    }
    RegressionParams {
        delta: 1.0,
        alpha,
        gamma,
    }
    .validate()?;
    if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
        return Err(Error::input(format!("probability {p} outside (0, 1)")));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

pub fn focal_loss(p: f64, y: u8, alpha: f64, gamma: f64) -> Result<f64> {
    let p = focal_inputs(p, y, alpha, gamma)?;
    Ok(if y == 1 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    })
}

pub fn focal_loss_grad(p: f64, y: u8, alpha: f64, gamma: f64) -> Result<f64> {
    let p = focal_inputs(p, y, alpha, gamma)?;
    Ok(if y == 1 {
        let q = 1.0 - p;
        let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        -alpha * (-dq * p.ln() + q.powf(gamma) / p)
    } else {
        let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        -(1.0 - alpha) * (dp * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    })
}

/// A scalar function of a point with a closed-form gradient.
pub trait Objective {
    fn name(&self) -> &str;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// True when a finite difference of width `step` around `x` would straddle a kink.
    fn non_smooth_near(&self, _x: &[f64], _step: f64) -> bool {
        false
    }
}

pub struct CrossEntropyObjective {
    pub labels: Vec<f64>,
}

impl Objective for CrossEntropyObjective {
    fn name(&self) -> &str {
        "cross_entropy"
    }
    fn value(&self, x: &[f64]) -> f64 {
        cross_entropy(x, &self.labels).expect("point inside domain")
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        cross_entropy_grad(x, &self.labels).expect("point inside domain")
    }
}

pub struct DiceObjective {
    pub labels: Vec<f64>,
}

impl Objective for DiceObjective {
    fn name(&self) -> &str {
        "dice"
    }
    fn value(&self, x: &[f64]) -> f64 {
        dice_loss(&self.labels, x).expect("point inside domain")
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        dice_loss_grad(&self.labels, x).expect("point inside domain")
    }
}

pub struct DualObjective {
    pub labels: Vec<f64>,
}

impl Objective for DualObjective {
    fn name(&self) -> &str {
        "dual"
    }
    fn value(&self, x: &[f64]) -> f64 {
        dual_loss(x, &self.labels).expect("point inside domain")
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        dual_loss_grad(x, &self.labels).expect("point inside domain")
    }
}

pub struct SmoothL1Objective {
    pub delta: f64,
}

impl Objective for SmoothL1Objective {
    fn name(&self) -> &str {
        "smooth_l1"
    }
    fn value(&self, x: &[f64]) -> f64 {
        smooth_l1(x[0], self.delta).expect("point inside domain")
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![smooth_l1_grad(x[0], self.delta).expect("point inside domain")]
    }
    fn non_smooth_near(&self, x: &[f64], step: f64) -> bool {
        (x[0] - 1.0).abs() <= 10.0 * step
    }
}

pub struct FocalObjective {
    pub label: u8,
    pub alpha: f64,
    pub gamma: f64,
}

impl Objective for FocalObjective {
    fn name(&self) -> &str {
        "focal"
    }
    fn value(&self, x: &[f64]) -> f64 {
        focal_loss(x[0], self.label, self.alpha, self.gamma).expect("point inside domain")
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![focal_loss_grad(x[0], self.label, self.alpha, self.gamma).expect("point inside domain")]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum GradientCheck {
    Checked { max_rel_error: f64 },
    /// The point sits on a branch boundary; no comparison was made.
    NonSmooth,
}

/// Compares the analytic gradient with central differences of width `step`.
///
/// Relative error per component is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradient(f: &dyn Objective, point: &[f64], step: f64) -> GradientCheck {
    if f.non_smooth_near(point, step) {
        return GradientCheck::NonSmooth;
    }
    let analytic = f.gradient(point);
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = f.value(&x);
        x[i] = point[i] - step;
        let down = f.value(&x);
        x[i] = point[i];
        let numeric = (up - down) / (2.0 * step);
        let diff = (analytic[i] - numeric).abs();
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    GradientCheck::Checked {
        max_rel_error: worst,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelftestRow {
    pub loss: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Step size and pass threshold of the gradient self-test.
pub const SELFTEST_STEP: f64 = 1e-5;
pub const SELFTEST_TOLERANCE: f64 = 1e-5;

/// Gradient checks for all five losses at `points` random interior points each.
/// Probabilities are drawn from [0.05, 0.95]; smooth L1 points within ten
/// steps of its branch point are skipped.
pub fn selftest(points: usize, seed: u64) -> Vec<SelftestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut run = |name: &str, rng: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng) -> (Box<dyn Objective>, Vec<f64>)| {
        let mut checked = 0;
        let mut skipped = 0;
        let mut worst = 0.0f64;
        for _ in 0..points {
            let (obj, x) = make(rng);
            match check_gradient(obj.as_ref(), &x, SELFTEST_STEP) {
                GradientCheck::Checked { max_rel_error } => {
                    checked += 1;
                    worst = worst.max(max_rel_error);
                }
                GradientCheck::NonSmooth => skipped += 1,
            }
        }
        rows.push(SelftestRow {
            loss: name.to_string(),
            checked,
            skipped,
            max_rel_error: worst,
            passed: checked > 0 && worst < SELFTEST_TOLERANCE,
        });
    };
    let probs = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
    };
    let binary = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
    };
    run("cross_entropy", &mut rng, &|r| {
        let y = binary(r, 8);
        (Box::new(CrossEntropyObjective { labels: y }), probs(r, 8))
    });
    run("dice", &mut rng, &|r| {
        let y: Vec<f64> = (0..8).map(|_| r.random_range(0.0..1.0)).collect();
        (Box::new(DiceObjective { labels: y }), probs(r, 8))
    });
    run("dual", &mut rng, &|r| {
        let y = binary(r, 8);
        (Box::new(DualObjective { labels: y }), probs(r, 8))
    });
    run("smooth_l1", &mut rng, &|r| {
        let mae = r.random_range(0.01..3.0);
        (Box::new(SmoothL1Objective { delta: 1.0 }), vec![mae])
    });
    run("focal", &mut rng, &|r| {
        let obj = FocalObjective {
            label: r.random_range(0..=1u8),
            alpha: r.random_range(0.1..0.9),
            gamma: r.random_range(0.0..3.0),
        };
        (Box::new(obj), probs(r, 1))
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.3], &[1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            0.693147,
            epsilon = 1e-6
        );
        assert!(cross_entropy(&[0.5], &[1.0, 0.0]).is_err());
        assert!(cross_entropy(&[], &[]).is_err());
        assert!(cross_entropy(&[1.2], &[1.0]).is_err());
        // p = 0 with y = 1 is clamped, not infinite.
        let v = cross_entropy(&[0.0], &[1.0]).unwrap();
        assert_abs_diff_eq!(v, -(PROB_EPS.ln()), epsilon = 1e-9);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dice_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            dice_loss(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-12
        );
        assert_eq!(dice_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn dual_example() {
        assert_abs_diff_eq!(
            dual_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            0.5f64.ln().abs() + 1.0 / 3.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(dual_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 1.026480, epsilon = 1e-6);
        assert_eq!(dual_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(0.5, 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(2.0, 1.0).unwrap(), 1.5);
        assert!(smooth_l1(-0.1, 1.0).is_err());
        // Literal branch at 1: with delta 2 the two sides do not meet.
        assert_eq!(smooth_l1(0.999_999, 2.0).unwrap() < 0.3, true);
        assert_eq!(smooth_l1(1.0, 2.0).unwrap(), 0.0);
        assert_eq!(
            check_gradient(&SmoothL1Objective { delta: 1.0 }, &[1.0], 1e-5),
            GradientCheck::NonSmooth
        );
    }

    #[test]
    fn focal_examples() {
        assert!(focal_loss(1.0, 1, 0.25, 2.0).unwrap() < 1e-20);
        assert_abs_diff_eq!(
            focal_loss(0.9, 1, 0.25, 2.0).unwrap(),
            0.000263,
            epsilon = 5e-7
        );
        for p in [0.1, 0.4, 0.77] {
            for y in [0u8, 1] {
                let bce = if y == 1 { -(p as f64).ln() } else { -(1.0 - p as f64).ln() };
                assert_abs_diff_eq!(focal_loss(p, y, 0.5, 0.0).unwrap(), 0.5 * bce, epsilon = 1e-15);
            }
        }
        assert!(focal_loss(0.5, 2, 0.25, 2.0).is_err());
        assert!(focal_loss(1.5, 1, 0.25, 2.0).is_err());
        assert!(focal_loss(0.5, 1, 1.0, 2.0).is_err());
    }

    #[test]
    fn selftest_passes() {
        let rows = selftest(50, 3);
        assert_eq!(rows.len(), 5);
        for r in rows {
            assert!(r.passed, "{r:?}");
        }
    }
}
