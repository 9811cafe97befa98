//! Cross-entropy, the MIM alignment penalty, and the composite full-shot
//! objective `ce + alpha · mim`.

use crate::encoder::{softmax_in_place, BlockUpstream, ForwardTrace, Upstream};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MimKind {
    Mse,
    Kl,
}

/// Which distribution is the reference in the KL variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(softmax(personal) || softmax(generic))`
    #[default]
    PersonalToGeneric,
    /// `KL(softmax(generic) || softmax(personal))`
    GenericToPersonal,
}

/// Which representation pairs enter the MIM sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MimPairing {
    /// Only the pooled final representation.
    #[default]
    Pooled,
    /// Pooled representation plus every PLoRA block output.
    AllBlocks,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MimSpec {
    pub kind: MimKind,
    /// Treat the personalized representation as a fixed teacher.
    pub teacher_stop_grad: bool,
    pub kl_direction: KlDirection,
    pub pairing: MimPairing,
}

impl Default for MimSpec {
    fn default() -> Self {
        Self {
            kind: MimKind::Mse,
            teacher_stop_grad: false,
            kl_direction: KlDirection::default(),
            pairing: MimPairing::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub mim: f64,
    pub alpha: f64,
}

/// `-log softmax(logits)[y]` and its gradient `softmax(logits) - onehot(y)`.
pub fn cross_entropy(logits: &Vector, y: usize) -> Result<(f64, Vector)> {
    let n = logits.len();
    if y >= n {
        return Err(Error::Input(format!("class {y} out of range for {n} logits")));
    }
    let mut probs = logits.as_slice().to_vec();
    softmax_in_place(&mut probs);
    let max = logits.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .as_slice()
            .iter()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    let loss = lse - logits[y];
    probs[y] -= 1.0;
    Ok((loss, Vector::from_vec(probs)?))
}

/// MIM value and gradients with respect to both representations.
#[derive(Clone, Debug, PartialEq)]
pub struct MimTerm {
    pub value: f64,
    pub grad_tilde: Vec<f64>,
    pub grad_personal: Vec<f64>,
}

/// MIM between a generic representation `h_tilde` and a personalized one,
/// using the default KL direction.
pub fn mim(h_tilde: &[f64], h_personal: &[f64], kind: MimKind, teacher_stop_grad: bool) -> Result<MimTerm> {
    mim_directed(h_tilde, h_personal, kind, teacher_stop_grad, KlDirection::default())
}

pub fn mim_directed(
    h_tilde: &[f64],
    h_personal: &[f64],
    kind: MimKind,
    teacher_stop_grad: bool,
    direction: KlDirection,
) -> Result<MimTerm> {
    if h_tilde.len() != h_personal.len() {
        return Err(Error::dim("mim", (1, h_tilde.len()), (1, h_personal.len())));
    }
    let n = h_tilde.len();
    let mut term = match kind {
        MimKind::Mse => {
            let mut value = 0.0;
            let mut grad_personal = Vec::with_capacity(n);
            for (&t, &p) in h_tilde.iter().zip(h_personal) {
                let diff = p - t;
                value += diff * diff;
                grad_personal.push(2.0 * diff / n as f64);
            }
            let grad_tilde = grad_personal.iter().map(|g| -g).collect();
            MimTerm {
                value: value / n as f64,
                grad_tilde,
                grad_personal,
            }
        }
        MimKind::Kl => {
            let (reference, other) = match direction {
                KlDirection::PersonalToGeneric => (h_personal, h_tilde),
                KlDirection::GenericToPersonal => (h_tilde, h_personal),
            };
            let (value, g_ref, g_other) = kl_softmax(reference, other);
            match direction {
                KlDirection::PersonalToGeneric => MimTerm {
                    value,
                    grad_tilde: g_other,
                    grad_personal: g_ref,
                },
                KlDirection::GenericToPersonal => MimTerm {
                    value,
                    grad_tilde: g_ref,
                    grad_personal: g_other,
                },
            }
        }
    };
    if teacher_stop_grad {
        term.grad_personal.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(term)
}

/// `KL(softmax(a) || softmax(b))` with gradients w.r.t. `a` and `b`.
fn kl_softmax(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let log_softmax = |x: &[f64]| {
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        x.iter().map(|v| v - lse).collect::<Vec<_>>()
    };
    let log_p = log_softmax(a);
    let log_q = log_softmax(b);
    let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
    let ratio: Vec<f64> = log_p.iter().zip(&log_q).map(|(lp, lq)| lp - lq).collect();
    let kl: f64 = p.iter().zip(&ratio).map(|(pi, r)| pi * r).sum();
    let grad_a = p.iter().zip(&ratio).map(|(pi, r)| pi * (r - kl)).collect();
    let grad_b = q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect();
    (kl, grad_a, grad_b)
}

/// MIM over matrices: MSE averages all entries, KL averages row-wise
/// divergences.
fn mim_matrix(tilde: &Matrix, personal: &Matrix, spec: &MimSpec) -> Result<(f64, Matrix, Matrix)> {
    if tilde.shape() != personal.shape() {
        return Err(Error::dim("mim", tilde.shape(), personal.shape()));
    }
    let (rows, cols) = tilde.shape();
    match spec.kind {
        MimKind::Mse => {
            let t = mim_directed(tilde.data(), personal.data(), MimKind::Mse, spec.teacher_stop_grad, spec.kl_direction)?;
            Ok((
                t.value,
                Matrix::from_vec(rows, cols, t.grad_tilde)?,
                Matrix::from_vec(rows, cols, t.grad_personal)?,
            ))
        }
        MimKind::Kl => {
            let mut value = 0.0;
            let mut g_t = Matrix::zeros(rows, cols);
            let mut g_p = Matrix::zeros(rows, cols);
            let inv = 1.0 / rows as f64;
            for r in 0..rows {
                let t = mim_directed(tilde.row(r), personal.row(r), MimKind::Kl, spec.teacher_stop_grad, spec.kl_direction)?;
                value += t.value * inv;
                for (o, g) in g_t.row_mut(r).iter_mut().zip(&t.grad_tilde) {
                    *o = g * inv;
                }
                for (o, g) in g_p.row_mut(r).iter_mut().zip(&t.grad_personal) {
                    *o = g * inv;
                }
            }
            Ok((value, g_t, g_p))
        }
    }
}

/// Full-shot loss for one sample.
#[derive(Clone, Debug)]
pub struct FullShotLoss {
    pub report: LossReport,
    pub personal: Upstream,
    /// Gradient into the generic trace; `None` when MIM did not run.
    pub generic: Option<Upstream>,
}

/// `ce(personal) + alpha · Σ mim(generic, personal)`.
///
/// `generic` is the trace of the same input with `p = 0`. Pass `None` when
/// the sample's user was masked by personalized dropout (the personal trace
/// already is the generic one, so the MIM term is zero) or when `alpha = 0`.
pub fn fullshot_loss(
    personal: &ForwardTrace,
    generic: Option<&ForwardTrace>,
    y: usize,
    alpha: f64,
    spec: &MimSpec,
) -> Result<FullShotLoss> {
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
    }
    let (ce, g_logits) = cross_entropy(&personal.logits, y)?;
    let mut personal_up = Upstream::logits(g_logits);
    let Some(generic) = generic else {
        return Ok(FullShotLoss {
            report: LossReport {
                total: ce,
                ce,
                mim: 0.0,
                alpha,
            },
            personal: personal_up,
            generic: None,
        });
    };
    if generic.blocks.len() != personal.blocks.len()
        || generic.pooled.len() != personal.pooled.len()
        || generic
            .blocks
            .iter()
            .zip(&personal.blocks)
            .any(|(a, b)| a.query.shape() != b.query.shape())
    {
        return Err(Error::Input("generic and personal traces come from different inputs".into()));
    }

    let pooled = mim_directed(
        generic.pooled.as_slice(),
        personal.pooled.as_slice(),
        spec.kind,
        spec.teacher_stop_grad,
        spec.kl_direction,
    )?;
    let mut value = pooled.value;
    let scale = |g: Vec<f64>| Vector::from_vec(g.into_iter().map(|v| v * alpha).collect());
    personal_up.pooled = Some(scale(pooled.grad_personal)?);
    let mut generic_up = Upstream {
        logits: Vector::zeros(personal.logits.len()),
        pooled: Some(scale(pooled.grad_tilde)?),
        blocks: None,
    };

    if spec.pairing == MimPairing::AllBlocks {
        let mut p_blocks = Vec::with_capacity(personal.blocks.len());
        let mut g_blocks = Vec::with_capacity(personal.blocks.len());
        for (pb, gb) in personal.blocks.iter().zip(&generic.blocks) {
            let (vq, gq_t, gq_p) = mim_matrix(&gb.query, &pb.query, spec)?;
            let (vv, gv_t, gv_p) = mim_matrix(&gb.value, &pb.value, spec)?;
            value += vq + vv;
            p_blocks.push(BlockUpstream {
                query: gq_p.scaled(alpha),
                value: gv_p.scaled(alpha),
            });
            g_blocks.push(BlockUpstream {
                query: gq_t.scaled(alpha),
                value: gv_t.scaled(alpha),
            });
        }
        personal_up.blocks = Some(p_blocks);
        generic_up.blocks = Some(g_blocks);
    }

    Ok(FullShotLoss {
        report: LossReport {
            total: ce + alpha * value,
            ce,
            mim: value,
            alpha,
        },
        personal: personal_up,
        generic: Some(generic_up),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, max_rel_error, Rng};

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec()).unwrap()
    }

    #[test]
    fn ce_uniform_logits() {
        let (loss, _) = cross_entropy(&v(&[0.3; 4]), 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_saturated() {
        let (loss, _) = cross_entropy(&v(&[10.0, -10.0]), 0).unwrap();
        assert!((0.0..1e-4).contains(&loss));
    }

    #[test]
    fn ce_rejects_bad_class() {
        assert!(matches!(cross_entropy(&v(&[0.0, 1.0]), 2), Err(Error::Input(_))));
    }

    #[test]
    fn ce_gradient_matches_fd() {
        let mut rng = Rng::new(1);
        let logits = Vector::gaussian(5, 2.0, &mut rng).unwrap();
        let (_, g) = cross_entropy(&logits, 3).unwrap();
        let num = finite_diff_grad(
            |m| cross_entropy(&Vector::from_matrix(m.clone()), 3).unwrap().0,
            &logits.to_row(),
            1e-5,
        )
        .unwrap();
        assert!(crate::linalg::max_abs_diff(g.as_slice(), num.data()) < 1e-6);
    }

    #[test]
    fn mim_self_distance_is_zero() {
        let x = [0.3, -1.2, 2.0];
        for kind in [MimKind::Mse, MimKind::Kl] {
            assert!(mim(&x, &x, kind, false).unwrap().value.abs() < 1e-15);
        }
    }

    #[test]
    fn mse_hand_value() {
        assert_eq!(mim(&[0.0, 0.0], &[1.0, 1.0], MimKind::Mse, false).unwrap().value, 1.0);
    }

    #[test]
    fn kl_two_point_closed_form() {
        // personal = softmax([0,0]) = (1/2, 1/2); generic = softmax([0, ln 3]) = (1/4, 3/4)
        let t = mim(&[0.0, 3f64.ln()], &[0.0, 0.0], MimKind::Kl, false).unwrap();
        let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((t.value - expected).abs() < 1e-10);
    }

    #[test]
    fn mim_length_mismatch() {
        assert!(matches!(mim(&[0.0], &[0.0, 1.0], MimKind::Mse, false), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mim_gradients_match_fd() {
        let mut rng = Rng::new(2);
        for kind in [MimKind::Mse, MimKind::Kl] {
            for dir in [KlDirection::PersonalToGeneric, KlDirection::GenericToPersonal] {
                let a = Vector::gaussian(4, 1.0, &mut rng).unwrap();
                let b = Vector::gaussian(4, 1.0, &mut rng).unwrap();
                let t = mim_directed(a.as_slice(), b.as_slice(), kind, false, dir).unwrap();
                let num_t = finite_diff_grad(
                    |m| mim_directed(m.data(), b.as_slice(), kind, false, dir).unwrap().value,
                    &a.to_row(),
                    1e-6,
                )
                .unwrap();
                let num_p = finite_diff_grad(
                    |m| mim_directed(a.as_slice(), m.data(), kind, false, dir).unwrap().value,
                    &b.to_row(),
                    1e-6,
                )
                .unwrap();
                assert!(max_rel_error(&t.grad_tilde, num_t.data(), 1e-8) < 1e-5);
                assert!(max_rel_error(&t.grad_personal, num_p.data(), 1e-8) < 1e-5);
            }
        }
    }

    #[test]
    fn stop_grad_blocks_teacher() {
        let t = mim(&[0.0, 1.0], &[2.0, -1.0], MimKind::Mse, true).unwrap();
        assert!(t.grad_personal.iter().all(|g| *g == 0.0));
        assert!(t.grad_tilde.iter().any(|g| *g != 0.0));
    }

    proptest::proptest! {
        #[test]
        fn mse_symmetric_and_kl_nonnegative(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let ab = mim(&a, &b, MimKind::Mse, false).unwrap().value;
            let ba = mim(&b, &a, MimKind::Mse, false).unwrap().value;
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            proptest::prop_assert!(mim(&a, &b, MimKind::Kl, false).unwrap().value >= -1e-15);
        }

        #[test]
        fn ce_nonnegative(logits in proptest::collection::vec(-20.0f64..20.0, 2..6), y in 0usize..2) {
            let (loss, _) = cross_entropy(&Vector::from_vec(logits).unwrap(), y).unwrap();
            proptest::prop_assert!(loss >= 0.0);
        }
    }
}
