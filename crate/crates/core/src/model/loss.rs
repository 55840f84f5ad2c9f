use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::{HeadKind, LossWeights};

/// `ln(2π)`
pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Trajectory negative log-likelihood per batch element, shape `(B)`.
///
/// BC: `Σ_t Σ_d 0.5·ln 2π + ln σ + (y − μ)² / 2σ²`.
/// DIM: `Σ_t ln 2π + ln l11 + ln l22 + 0.5·‖L⁻¹(y − μ)‖²`.
pub fn nll<T: Scalar>(tape: &mut Tape<T>, head: HeadKind, mu: Var, scale: Var, y: Var) -> Result<Var> {
    let ms = tape.shape(mu).to_vec();
    if ms.len() != 3 || ms[2] != 2 || tape.shape(y) != ms.as_slice() {
        return Err(Error::shape("nll", &ms, tape.shape(y)));
    }
    let (b, t) = (ms[0], ms[1]);
    if tape.shape(scale) != [b, t, head.scale_width()] {
        return Err(Error::shape("nll", tape.shape(scale), &[b, t, head.scale_width()]));
    }
    let r = tape.sub(y, mu)?;
    let per_step = match head {
        HeadKind::Bc => {
            let neg = tape.scale(scale, -T::one())?;
            let inv = tape.exp(neg)?;
            let z = tape.mul(r, inv)?;
            let z2 = tape.square(z)?;
            let half = tape.scale(z2, T::lit(0.5))?;
            let s = tape.add(scale, half)?;
            tape.add_scalar(s, T::lit(0.5 * LOG_2PI))?
        }
        HeadKind::Dim => {
            let r1 = tape.slice(r, 2, 0, 1)?;
            let r2 = tape.slice(r, 2, 1, 1)?;
            let ll11 = tape.slice(scale, 2, 0, 1)?;
            let l21 = tape.slice(scale, 2, 1, 1)?;
            let ll22 = tape.slice(scale, 2, 2, 1)?;
            let n11 = tape.scale(ll11, -T::one())?;
            let inv11 = tape.exp(n11)?;
            let n22 = tape.scale(ll22, -T::one())?;
            let inv22 = tape.exp(n22)?;
            let s1 = tape.mul(r1, inv11)?;
            let c = tape.mul(l21, s1)?;
            let rem = tape.sub(r2, c)?;
            let s2 = tape.mul(rem, inv22)?;
            let q1 = tape.square(s1)?;
            let q2 = tape.square(s2)?;
            let q = tape.add(q1, q2)?;
            let q = tape.scale(q, T::lit(0.5))?;
            let ld = tape.add(ll11, ll22)?;
            let s = tape.add(ld, q)?;
            tape.add_scalar(s, T::lit(LOG_2PI))?
        }
    };
    let w = tape.shape(per_step)[2];
    let flat = tape.reshape(per_step, &[b, t * w])?;
    tape.sum(flat, 1)
}

/// Scalar (rank-0) loss and its unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// `mean_B NLL`
    pub nll: Var,
    /// `mean_B Σ_t ‖ŷ_t − y_t‖²`
    pub ade: Var,
    /// `mean_B ‖ŷ_T − y_T‖²`
    pub fde: Var,
}

/// `λ_nll·mean_B(NLL) + λ_ade·mean_B Σ_t ‖ŷ_t − y_t‖² + λ_fde·mean_B ‖ŷ_T − y_T‖²`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head: HeadKind,
    mu: Var,
    scale: Var,
    realized: Var,
    y: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let shape = tape.shape(y).to_vec();
    if tape.shape(realized) != shape.as_slice() {
        return Err(Error::shape("combined_loss", tape.shape(realized), &shape));
    }
    let (b, t) = (shape[0], shape[1]);

    let per = nll(tape, head, mu, scale, y)?;
    let nll_term = tape.mean_all(per)?;

    let d = tape.sub(realized, y)?;
    let sq = tape.square(d)?;
    let flat = tape.reshape(sq, &[b, t * 2])?;
    let per = tape.sum(flat, 1)?;
    let ade_term = tape.mean_all(per)?;

    let last = tape.slice(sq, 1, t - 1, 1)?;
    let last = tape.reshape(last, &[b, 2])?;
    let per = tape.sum(last, 1)?;
    let fde_term = tape.mean_all(per)?;

    let mut total: Option<Var> = None;
    for (w, v) in [(weights.nll, nll_term), (weights.ade, ade_term), (weights.fde, fde_term)] {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { tape.scale(v, T::lit(w))? };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(LossTerms {
        total: total.expect("validated weights are not all zero"),
        nll: nll_term,
        ade: ade_term,
        fde: fde_term,
    })
}
