//! Overlap coefficients (Jaccard, Dice, Tversky) on hard and soft masks.
//!
//! All three coefficients consume the same three disjoint partitions of the
//! prediction set P and ground-truth set G: |P∩G|, |P\G| and |G\P|.
//! Hard coefficients use exact counts with the convention that two empty
//! masks agree perfectly. Soft coefficients relax the counts to sums over
//! probabilities and are smoothed as `(num + eps) / (den + eps)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction has {pred} voxels, truth has {truth}")]
    ShapeMismatch { pred: usize, truth: usize },
    #[error("value {value} at index {index} is not 0 or 1")]
    NonBinaryInput { index: usize, value: f64 },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid Tversky parameters alpha={alpha} beta={beta} eps={epsilon}")]
    InvalidParams { alpha: f64, beta: f64, epsilon: f64 },
}

/// Sizes of the three disjoint partitions of P ∪ G.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverlapCounts {
    /// |P ∩ G|
    pub true_pos: f64,
    /// |P \ G|
    pub false_pos: f64,
    /// |G \ P|
    pub false_neg: f64,
}

impl OverlapCounts {
    pub fn new(true_pos: f64, false_pos: f64, false_neg: f64) -> Self {
        Self {
            true_pos,
            false_pos,
            false_neg,
        }
    }

    fn is_empty(&self) -> bool {
        self.true_pos == 0.0 && self.false_pos == 0.0 && self.false_neg == 0.0
    }
}

/// Tversky weights. `alpha` penalises false positives, `beta` false
/// negatives; they must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTverskyParams", into = "RawTverskyParams")]
pub struct TverskyParams {
    alpha: f64,
    beta: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTverskyParams {
    alpha: f64,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl TryFrom<RawTverskyParams> for TverskyParams {
    type Error = LossError;

    fn try_from(raw: RawTverskyParams) -> Result<Self, Self::Error> {
        TverskyParams::with_epsilon(raw.alpha, raw.beta.unwrap_or(1.0 - raw.alpha), raw.epsilon)
    }
}

impl From<TverskyParams> for RawTverskyParams {
    fn from(p: TverskyParams) -> Self {
        Self {
            alpha: p.alpha,
            beta: Some(p.beta),
            epsilon: p.epsilon,
        }
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

impl TverskyParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, LossError> {
        Self::with_epsilon(alpha, beta, DEFAULT_EPSILON)
    }

    /// Parameters from `alpha` alone, with `beta = 1 - alpha`.
    pub fn from_alpha(alpha: f64) -> Result<Self, LossError> {
        Self::new(alpha, 1.0 - alpha)
    }

    pub fn with_epsilon(alpha: f64, beta: f64, epsilon: f64) -> Result<Self, LossError> {
        let valid = alpha >= 0.0
            && beta >= 0.0
            && ((alpha + beta) - 1.0).abs() <= 1e-12
            && epsilon > 0.0
            && epsilon.is_finite();
        if !valid {
            return Err(LossError::InvalidParams {
                alpha,
                beta,
                epsilon,
            });
        }
        Ok(Self {
            alpha,
            beta,
            epsilon,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Jaccard,
    Dice,
    Tversky,
}

impl LossKind {
    /// Weights `(w_tp, w_fp, w_fn)` so the coefficient is
    /// `w_tp·tp / (w_tp·tp + w_fp·fp + w_fn·fn)`.
    fn weights(self, p: &TverskyParams) -> (f64, f64, f64) {
        match self {
            LossKind::Jaccard => (1.0, 1.0, 1.0),
            LossKind::Dice => (2.0, 1.0, 1.0),
            LossKind::Tversky => (1.0, p.alpha, p.beta),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jaccard" => Ok(LossKind::Jaccard),
            "dice" => Ok(LossKind::Dice),
            "tversky" => Ok(LossKind::Tversky),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

fn check_shapes(pred: &[f64], truth: &[f64]) -> Result<(), LossError> {
    if pred.len() != truth.len() {
        return Err(LossError::ShapeMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

fn check_binary(mask: &[f64]) -> Result<(), LossError> {
    match mask.iter().position(|&x| x != 0.0 && x != 1.0) {
        Some(index) => Err(LossError::NonBinaryInput {
            index,
            value: mask[index],
        }),
        None => Ok(()),
    }
}

fn check_probability(pred: &[f64]) -> Result<(), LossError> {
    match pred.iter().position(|&x| !(0.0..=1.0).contains(&x)) {
        Some(index) => Err(LossError::OutOfRange {
            index,
            value: pred[index],
        }),
        None => Ok(()),
    }
}

/// Partition counts for two binary masks.
pub fn counts(pred: &[f64], truth: &[f64]) -> Result<OverlapCounts, LossError> {
    check_shapes(pred, truth)?;
    check_binary(pred)?;
    check_binary(truth)?;
    let mut c = OverlapCounts::default();
    for (&p, &g) in pred.iter().zip(truth) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.true_pos += 1.0,
            (true, false) => c.false_pos += 1.0,
            (false, true) => c.false_neg += 1.0,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Relaxed counts: `tp = Σ p·g`, `fp = Σ p·(1-g)`, `fn = Σ (1-p)·g`.
pub fn soft_counts(pred: &[f64], truth: &[f64]) -> Result<OverlapCounts, LossError> {
    check_shapes(pred, truth)?;
    check_probability(pred)?;
    check_binary(truth)?;
    let mut c = OverlapCounts::default();
    for (&p, &g) in pred.iter().zip(truth) {
        c.true_pos += p * g;
        c.false_pos += p * (1.0 - g);
        c.false_neg += (1.0 - p) * g;
    }
    Ok(c)
}

fn hard_coefficient(c: &OverlapCounts, (wt, wp, wn): (f64, f64, f64)) -> f64 {
    if c.is_empty() {
        return 1.0;
    }
    let num = wt * c.true_pos;
    let den = num + wp * c.false_pos + wn * c.false_neg;
    if den == 0.0 {
        // Only reachable with zero weights on the non-empty partitions.
        return 1.0;
    }
    num / den
}

/// Jaccard index `tp / (tp + fp + fn)`; 1 when both masks are empty.
pub fn jaccard(c: &OverlapCounts) -> f64 {
    hard_coefficient(c, (1.0, 1.0, 1.0))
}

/// Sørensen-Dice `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
pub fn dice(c: &OverlapCounts) -> f64 {
    hard_coefficient(c, (2.0, 1.0, 1.0))
}

/// Tversky index `tp / (tp + α·fp + β·fn)`; 1 when both masks are empty.
pub fn tversky(c: &OverlapCounts, p: &TverskyParams) -> f64 {
    hard_coefficient(c, (1.0, p.alpha, p.beta))
}

pub fn coefficient(kind: LossKind, c: &OverlapCounts, p: &TverskyParams) -> f64 {
    hard_coefficient(c, kind.weights(p))
}

/// Smoothed soft coefficient `(num + eps) / (den + eps)`.
pub fn soft_coefficient(kind: LossKind, c: &OverlapCounts, p: &TverskyParams) -> f64 {
    let (wt, wp, wn) = kind.weights(p);
    let num = wt * c.true_pos;
    let den = num + wp * c.false_pos + wn * c.false_neg;
    (num + p.epsilon) / (den + p.epsilon)
}

/// Soft overlap loss `1 - coefficient` and its gradient with respect to
/// every predicted probability.
pub fn soft_loss_grad(
    pred: &[f64],
    truth: &[f64],
    kind: LossKind,
    p: &TverskyParams,
) -> Result<(f64, Vec<f64>), LossError> {
    let c = soft_counts(pred, truth)?;
    let (wt, wp, wn) = kind.weights(p);
    let num = wt * c.true_pos + p.epsilon;
    let den = wt * c.true_pos + wp * c.false_pos + wn * c.false_neg + p.epsilon;
    let loss = 1.0 - num / den;

    // d num/dp_i = wt·g_i ; d den/dp_i = wt·g_i + wp·(1-g_i) - wn·g_i
    let inv_den2 = 1.0 / (den * den);
    let grad = truth
        .iter()
        .map(|&g| {
            let dnum = wt * g;
            let dden = wt * g + wp * (1.0 - g) - wn * g;
            -(dnum * den - num * dden) * inv_den2
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks() {
        let m = [1.0, 0.0, 1.0, 1.0];
        let c = counts(&m, &m).unwrap();
        assert_eq!(c, OverlapCounts::new(3.0, 0.0, 0.0));
        assert_eq!(jaccard(&c), 1.0);
        assert_eq!(dice(&c), 1.0);
    }

    #[test]
    fn disjoint_masks() {
        let p = [1.0, 1.0, 0.0, 0.0, 0.0];
        let g = [0.0, 0.0, 1.0, 1.0, 1.0];
        let c = counts(&p, &g).unwrap();
        assert_eq!(c, OverlapCounts::new(0.0, 2.0, 3.0));
        assert_eq!(jaccard(&c), 0.0);
        assert_eq!(1.0 - dice(&c), 1.0);
    }

    #[test]
    fn worked_partition_example() {
        // P = {v1, v2, v3}, G = {v1, v2, v4}
        let p = [1.0, 1.0, 1.0, 0.0];
        let g = [1.0, 1.0, 0.0, 1.0];
        let c = counts(&p, &g).unwrap();
        assert_eq!(c, OverlapCounts::new(2.0, 1.0, 1.0));
        assert_eq!(jaccard(&c), 0.5);
        assert!((dice(&c) - 2.0 / 3.0).abs() < 1e-15);
        let j = jaccard(&c);
        assert!((dice(&c) - 2.0 * j / (1.0 + j)).abs() < 1e-15);
        let half = TverskyParams::new(0.5, 0.5).unwrap();
        assert_eq!(tversky(&c, &half), dice(&c));
    }

    #[test]
    fn tversky_asymmetry() {
        let fp_heavy = OverlapCounts::new(2.0, 2.0, 0.0);
        let t = tversky(&fp_heavy, &TverskyParams::from_alpha(0.7).unwrap());
        assert!((t - 2.0 / 3.4).abs() < 1e-12);
        assert!((t - 0.5882).abs() < 1e-4);

        let fn_heavy = OverlapCounts::new(2.0, 0.0, 2.0);
        let beta_big = tversky(&fn_heavy, &TverskyParams::from_alpha(0.3).unwrap());
        let beta_small = tversky(&fn_heavy, &TverskyParams::from_alpha(0.7).unwrap());
        assert!((beta_big - 2.0 / 3.4).abs() < 1e-12);
        assert!((beta_small - 2.0 / 2.6).abs() < 1e-12);
        assert!((beta_small - 0.7692).abs() < 1e-4);
        assert!(beta_big < beta_small);
    }

    #[test]
    fn empty_masks_agree() {
        let z = [0.0; 8];
        let c = counts(&z, &z).unwrap();
        assert_eq!(jaccard(&c), 1.0);
        assert_eq!(dice(&c), 1.0);
        assert_eq!(tversky(&c, &TverskyParams::default()), 1.0);
    }

    #[test]
    fn params_must_sum_to_one() {
        assert!(TverskyParams::new(0.6, 0.6).is_err());
        assert!(TverskyParams::new(-0.1, 1.1).is_err());
        assert!(TverskyParams::with_epsilon(0.5, 0.5, 0.0).is_err());
        assert!(TverskyParams::new(0.3, 0.7).is_ok());
    }

    #[test]
    fn params_deserialize_with_validation() {
        let p: TverskyParams = serde_json::from_str(r#"{"alpha": 0.3}"#).unwrap();
        assert!((p.beta() - 0.7).abs() < 1e-15);
        assert!(serde_json::from_str::<TverskyParams>(r#"{"alpha": 0.3, "beta": 0.3}"#).is_err());
    }

    #[test]
    fn counts_errors() {
        assert!(matches!(
            counts(&[1.0], &[1.0, 0.0]),
            Err(LossError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            counts(&[0.5], &[1.0]),
            Err(LossError::NonBinaryInput { index: 0, .. })
        ));
        assert!(matches!(
            soft_counts(&[1.5], &[1.0]),
            Err(LossError::OutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn soft_counts_reduce_to_hard() {
        let p = [1.0, 0.0, 1.0, 0.0, 1.0];
        let g = [1.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(soft_counts(&p, &g).unwrap(), counts(&p, &g).unwrap());
    }

    #[test]
    fn soft_counts_half() {
        let g = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let p = [0.5; 6];
        let c = soft_counts(&p, &g).unwrap();
        assert_eq!(c, OverlapCounts::new(1.5, 1.5, 1.5));
    }

    #[test]
    fn perfect_soft_prediction_has_near_zero_loss() {
        let g = [1.0, 0.0, 1.0, 0.0];
        for kind in [LossKind::Jaccard, LossKind::Dice, LossKind::Tversky] {
            let (loss, _) = soft_loss_grad(&g, &g, kind, &TverskyParams::default()).unwrap();
            assert!(loss.abs() < 1e-5);
        }
    }

    #[test]
    fn single_voxel_dice_loss() {
        let eps = DEFAULT_EPSILON;
        let (loss, _) =
            soft_loss_grad(&[0.5], &[1.0], LossKind::Dice, &TverskyParams::default()).unwrap();
        let expected = 1.0 - (1.0 + eps) / (1.5 + eps);
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 1.0 / 3.0).abs() < 1e-6);
    }
}
