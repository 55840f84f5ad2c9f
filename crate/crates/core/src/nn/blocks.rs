//! Residual backbone blocks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::layers::{Conv, WsConv};
use super::params::{Bound, ParamStore};

/// Default residual branch scale.
pub const NF_ALPHA: f64 = 0.2;

/// Normalizer-free residual block:
/// `y = skip(x) + alpha · conv2(silu(conv1(silu(beta · x))))`.
#[derive(Clone, Debug)]
pub struct NfBlock {
    pub conv1: WsConv,
    pub conv2: WsConv,
    pub skip: Option<WsConv>,
    pub alpha: f64,
    pub beta: f64,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl NfBlock {
    /// `beta` is `1 / expected_std` of the block input.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        alpha: f64,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {stride}")));
        }
        if !(alpha >= 0.0 && beta > 0.0) {
            return Err(Error::Config(format!("{name}: need alpha >= 0 and beta > 0")));
        }
        let conv1 = WsConv::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, rng);
        let conv2 = WsConv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng);
        let skip = (stride != 1 || cin != cout)
            .then(|| WsConv::new(store, &format!("{name}.skip"), cin, cout, 1, stride, rng));
        Ok(Self {
            conv1,
            conv2,
            skip,
            alpha,
            beta,
            cin,
            cout,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        check_channels(tape, x, self.cin, "nf_block")?;
        let scaled = tape.scale(x, T::lit(self.beta))?;
        let h = tape.silu(scaled)?;
        let b = self.conv1.forward(tape, p, h)?;
        let b = tape.silu(b)?;
        let b = self.conv2.forward(tape, p, b)?;
        let b = tape.scale(b, T::lit(self.alpha))?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, p, x)?,
            None => x,
        };
        tape.add(skip, b)
    }
}

/// Depthwise 3×3 → relu → pointwise 1×1 → relu, with a residual when shapes allow.
#[derive(Clone, Debug)]
pub struct DwsBlock {
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl DwsBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {stride}")));
        }
        Ok(Self {
            depthwise: Conv::depthwise(store, &format!("{name}.dw"), cin, 3, stride, rng),
            pointwise: Conv::new(store, &format!("{name}.pw"), cin, cout, 1, 1, rng),
            cin,
            cout,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        check_channels(tape, x, self.cin, "dws_block")?;
        let h = self.depthwise.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.pointwise.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        if self.stride == 1 && self.cin == self.cout {
            tape.add(x, h)
        } else {
            Ok(h)
        }
    }
}

fn check_channels<T: Scalar>(tape: &Tape<T>, x: Var, cin: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != cin {
        return Err(Error::shape(op, s, &[0, cin, 0, 0]));
    }
    Ok(())
}
