//! Second-order training objectives: per-sample gradient and hessian of
//! the loss with respect to the three class margins.
//!
//! Both objectives support per-class weights applied multiplicatively to
//! the sample's loss. Hessians are floored at 1e-16 so Newton-style leaf
//! values stay finite.

use super::softmax;
use crate::schema::N_CLASSES;
use serde::{Deserialize, Serialize};

pub const HESS_FLOOR: f64 = 1e-16;
const P_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ObjectiveKind {
    WeightedSoftmax,
    Focal { gamma: f64 },
}

impl ObjectiveKind {
    pub fn grad_hess(
        &self,
        margins: &[f64; N_CLASSES],
        label: usize,
        class_weights: &[f64; N_CLASSES],
    ) -> ([f64; N_CLASSES], [f64; N_CLASSES]) {
        match self {
            ObjectiveKind::WeightedSoftmax => {
                weighted_softmax_objective(margins, label, class_weights)
            }
            ObjectiveKind::Focal { gamma } => {
                focal_objective(margins, label, *gamma, class_weights)
            }
        }
    }

    /// Per-sample loss value (used for the training-loss trace).
    pub fn loss(
        &self,
        margins: &[f64; N_CLASSES],
        label: usize,
        class_weights: &[f64; N_CLASSES],
    ) -> f64 {
        let p = softmax(margins);
        let u = p[label].clamp(P_CLAMP, 1.0 - P_CLAMP);
        let w = class_weights[label];
        match self {
            ObjectiveKind::WeightedSoftmax => -w * u.ln(),
            ObjectiveKind::Focal { gamma } => -w * (1.0 - u).powf(*gamma) * u.ln(),
        }
    }
}

/// Weighted multinomial cross-entropy: loss = w·(−log p_label).
///
/// grad_c = w·(p_c − 1[c=label]), hess_c = w·p_c·(1−p_c).
pub fn weighted_softmax_objective(
    margins: &[f64; N_CLASSES],
    label: usize,
    class_weights: &[f64; N_CLASSES],
) -> ([f64; N_CLASSES], [f64; N_CLASSES]) {
    let p = softmax(margins);
    let w = class_weights[label];
    let mut grad = [0.0; N_CLASSES];
    let mut hess = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        let y = if c == label { 1.0 } else { 0.0 };
        grad[c] = w * (p[c] - y);
        hess[c] = (w * p[c] * (1.0 - p[c])).max(HESS_FLOOR);
    }
    (grad, hess)
}

/// Focal loss FL(p_t) = −(1−p_t)^γ·log(p_t) on the true-class probability,
/// scaled by the label's class weight; derivatives are taken analytically
/// through the softmax.
///
/// With u = p_label and φ(u) = −w·(1−u)^γ·ln u:
///   dφ/du  = w·[γ(1−u)^{γ−1}·ln u − (1−u)^γ/u]
///   d²φ/du² = w·[−γ(γ−1)(1−u)^{γ−2}·ln u + 2γ(1−u)^{γ−1}/u + (1−u)^γ/u²]
/// and per margin c:
///   du/dm_c = u·(1[c=label] − p_c)
///   d²u/dm_c² = u·(1[c=label] − p_c)² − u·p_c·(1−p_c)
pub fn focal_objective(
    margins: &[f64; N_CLASSES],
    label: usize,
    gamma: f64,
    class_weights: &[f64; N_CLASSES],
) -> ([f64; N_CLASSES], [f64; N_CLASSES]) {
    let p = softmax(margins);
    let w = class_weights[label];
    let u = p[label].clamp(P_CLAMP, 1.0 - P_CLAMP);
    let one_minus = 1.0 - u;
    let ln_u = u.ln();

    // Guard γ-dependent terms so γ = 0 and γ = 1 never produce 0·∞.
    let t_pow = |e: f64| one_minus.powf(e);
    let phi1 = {
        let a = if gamma == 0.0 { 0.0 } else { gamma * t_pow(gamma - 1.0) * ln_u };
        w * (a - t_pow(gamma) / u)
    };
    let phi2 = {
        let a = if gamma == 0.0 || gamma == 1.0 {
            0.0
        } else {
            -gamma * (gamma - 1.0) * t_pow(gamma - 2.0) * ln_u
        };
        let b = if gamma == 0.0 { 0.0 } else { 2.0 * gamma * t_pow(gamma - 1.0) / u };
        w * (a + b + t_pow(gamma) / (u * u))
    };

    let mut grad = [0.0; N_CLASSES];
    let mut hess = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        let y = if c == label { 1.0 } else { 0.0 };
        let du = u * (y - p[c]);
        let d2u = u * (y - p[c]).powi(2) - u * p[c] * (1.0 - p[c]);
        grad[c] = phi1 * du;
        hess[c] = (phi2 * du * du + phi1 * d2u).max(HESS_FLOOR);
    }
    (grad, hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn fd_check(kind: ObjectiveKind, margins: [f64; 3], label: usize, weights: [f64; 3]) {
        let (grad, hess) = kind.grad_hess(&margins, label, &weights);
        let base = kind.loss(&margins, label, &weights);
        for c in 0..3 {
            let h = 1e-5;
            let mut up = margins;
            up[c] += h;
            let mut dn = margins;
            dn[c] -= h;
            let lu = kind.loss(&up, label, &weights);
            let ld = kind.loss(&dn, label, &weights);
            let fd_grad = (lu - ld) / (2.0 * h);
            let tol = 1e-4 * fd_grad.abs().max(grad[c].abs()) + 1e-8;
            assert!(
                (grad[c] - fd_grad).abs() <= tol,
                "{kind:?} grad[{c}] {g} vs fd {fd_grad} at {margins:?} label {label}",
                g = grad[c],
            );

            let h2 = 1e-4;
            let mut up = margins;
            up[c] += h2;
            let mut dn = margins;
            dn[c] -= h2;
            // The analytic hessian is floored at HESS_FLOOR, so the oracle
            // is floored the same way before comparison.
            let fd_hess =
                ((kind.loss(&up, label, &weights) - 2.0 * base + kind.loss(&dn, label, &weights))
                    / (h2 * h2))
                    .max(HESS_FLOOR);
            let tol = 1e-3 * fd_hess.abs().max(hess[c].abs()) + 1e-6;
            assert!(
                (hess[c] - fd_hess).abs() <= tol,
                "{kind:?} hess[{c}] {h} vs fd {fd_hess} at {margins:?} label {label}",
                h = hess[c],
            );
        }
    }

    #[test]
    fn softmax_gradient_uniform_case() {
        let (grad, _) = weighted_softmax_objective(&[0.0, 0.0, 0.0], 0, &[1.0, 1.0, 1.0]);
        assert!((grad[0] + 2.0 / 3.0).abs() < 1e-12);
        assert!((grad[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((grad[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_objective_linear_in_weight() {
        let margins = [0.3, -1.2, 0.8];
        let (g1, h1) = weighted_softmax_objective(&margins, 1, &[1.0, 2.0, 1.0]);
        let (g2, h2) = weighted_softmax_objective(&margins, 1, &[1.0, 4.0, 1.0]);
        for c in 0..3 {
            assert!((g2[c] - 2.0 * g1[c]).abs() < 1e-12);
            assert!((h2[c] - 2.0 * h1[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = stream_rng(7, 0x0b7ec7);
        for _ in 0..1000 {
            let margins = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            let label = rng.random_range(0..3usize);
            let weights = [
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
            ];
            fd_check(ObjectiveKind::WeightedSoftmax, margins, label, weights);
        }
    }

    #[test]
    fn focal_gradients_match_finite_differences() {
        let mut rng = stream_rng(11, 0xf0ca1);
        for i in 0..1000 {
            let margins = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            let label = rng.random_range(0..3usize);
            let weights = [
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
            ];
            let gamma = match i % 4 {
                0 => 0.5,
                1 => 1.0,
                2 => 2.0,
                _ => 3.0,
            };
            fd_check(ObjectiveKind::Focal { gamma }, margins, label, weights);
        }
    }

    #[test]
    fn focal_vanishes_when_confident() {
        let margins = [20.0, 0.0, 0.0];
        let kind = ObjectiveKind::Focal { gamma: 2.0 };
        assert!(kind.loss(&margins, 0, &[1.0; 3]) < 1e-12);
        let (grad, _) = kind.grad_hess(&margins, 0, &[1.0; 3]);
        for c in 0..3 {
            assert!(grad[c].abs() < 1e-8, "grad[{c}] = {}", grad[c]);
        }
    }

    #[test]
    fn focal_gamma_zero_is_weighted_softmax() {
        let mut rng = stream_rng(13, 0x9a);
        for _ in 0..200 {
            let margins = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            let label = rng.random_range(0..3usize);
            let weights = [
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
            ];
            let (gf, hf) = focal_objective(&margins, label, 0.0, &weights);
            let (gs, hs) = weighted_softmax_objective(&margins, label, &weights);
            for c in 0..3 {
                assert!((gf[c] - gs[c]).abs() < 1e-12);
                assert!((hf[c] - hs[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hessians_are_never_negative() {
        let mut rng = stream_rng(17, 0x4e55);
        for _ in 0..500 {
            let margins = [
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            ];
            let label = rng.random_range(0..3usize);
            let (_, h) = focal_objective(&margins, label, 2.0, &[1.0; 3]);
            for c in 0..3 {
                assert!(h[c] >= HESS_FLOOR);
            }
        }
    }
}
