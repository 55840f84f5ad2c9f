//! Gated recurrent unit with a learned input embedding.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::layers::Linear;
use super::params::{Bound, ParamId, ParamKind, ParamStore};

/// ```text
/// in = embed(y_prev)
/// r  = σ(in·W_r + z·U_r + b_r)
/// u  = σ(in·W_u + z·U_u + b_u)
/// c  = tanh(in·W_c + (r⊙z)·U_c + b_c)
/// z' = (1 − u)⊙z + u⊙c
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub embed: Linear,
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["reset", "update", "cand"];

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let embed = Linear::new(store, &format!("{name}.embed"), input, hidden, rng);
        let w = GATES.map(|g| store.he(format!("{name}.w_{g}"), &[hidden, hidden], hidden, rng));
        let u = GATES.map(|g| store.he(format!("{name}.u_{g}"), &[hidden, hidden], hidden, rng));
        let b = GATES.map(|g| store.zeros(format!("{name}.b_{g}"), ParamKind::Bias, hidden));
        Self {
            embed,
            w,
            u,
            b,
            input,
            hidden,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, y_prev: Var, z: Var) -> Result<Var> {
        let (ys, zs) = (tape.shape(y_prev), tape.shape(z));
        if ys.len() != 2 || zs.len() != 2 || ys[1] != self.input || zs[1] != self.hidden || ys[0] != zs[0] {
            return Err(Error::shape("gru_cell", ys, zs));
        }
        let e = self.embed.forward(tape, p, y_prev)?;
        let gate = |tape: &mut Tape<T>, i: usize, hz: Var| -> Result<Var> {
            let a = tape.matmul(e, p[self.w[i]])?;
            let b = tape.matmul(hz, p[self.u[i]])?;
            let s = tape.add(a, b)?;
            tape.add_along(s, p[self.b[i]], 1)
        };
        let r = gate(tape, 0, z)?;
        let r = tape.sigmoid(r)?;
        let u = gate(tape, 1, z)?;
        let u = tape.sigmoid(u)?;
        let rz = tape.mul(r, z)?;
        let c = gate(tape, 2, rz)?;
        let c = tape.tanh(c)?;
        // z + u⊙(c − z)
        let diff = tape.sub(c, z)?;
        let step = tape.mul(u, diff)?;
        tape.add(z, step)
    }
}
