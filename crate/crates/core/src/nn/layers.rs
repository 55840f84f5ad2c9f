//! Dense and convolutional layers with scaled weight standardization.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::{Bound, ParamId, ParamKind, ParamStore};

/// Guards the fan-in variance in weight standardization.
pub const WS_EPS: f64 = 1e-6;

/// `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.he(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng),
            b: store.zeros(format!("{name}.bias"), ParamKind::Bias, fan_out),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_along(y, p[self.b], 1)
    }
}

/// Standardizes each output channel's fan-in slice of a `(Co, …)` kernel:
/// `gain · (w − mean) / sqrt(max(fan_in · var, eps))`.
pub fn standardize_weights<T: Scalar>(tape: &mut Tape<T>, w: Var, gain: Var) -> Result<Var> {
    let shape = tape.shape(w).to_vec();
    if shape.len() < 2 || tape.shape(gain) != [shape[0]] {
        return Err(Error::shape("standardize_weights", &shape, tape.shape(gain)));
    }
    let co = shape[0];
    let fan_in = shape[1..].iter().product::<usize>();
    let flat = tape.reshape(w, &[co, fan_in])?;
    let mean = tape.mean(flat, 1)?;
    let neg_mean = tape.scale(mean, -T::one())?;
    let centered = tape.add_along(flat, neg_mean, 0)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, 1)?;
    let scaled_var = tape.scale(var, T::lit(fan_in as f64))?;
    let guarded = tape.clamp(scaled_var, T::lit(WS_EPS), T::infinity())?;
    let inv_std = tape.powf(guarded, T::lit(-0.5))?;
    let factor = tape.mul(inv_std, gain)?;
    let out = tape.mul_along(centered, factor, 0)?;
    tape.reshape(out, &shape)
}

/// Value-level standardization, for inspection and tests.
pub fn standardize_kernel<T: Scalar>(w: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (wv, gv) = (tape.constant(w.clone()), tape.constant(gain.clone()));
    let out = standardize_weights(&mut tape, wv, gv)?;
    Ok(tape.value(out).clone())
}

/// Convolution whose kernel is weight-standardized at every forward pass.
#[derive(Clone, Debug)]
pub struct WsConv {
    pub w: ParamId,
    pub gain: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl WsConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            w: store.he(format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng),
            gain: store.ones(format!("{name}.gain"), ParamKind::Gain, cout),
            b: store.zeros(format!("{name}.bias"), ParamKind::Bias, cout),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = standardize_weights(tape, p[self.w], p[self.gain])?;
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        tape.add_along(y, p[self.b], 1)
    }
}

/// Plain convolution with bias (used by the depthwise-separable baseline).
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.he(format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            b: store.zeros(format!("{name}.bias"), ParamKind::Bias, cout),
            stride,
            padding: kernel / 2,
            depthwise: false,
        }
    }

    pub fn depthwise<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.he(format!("{name}.weight"), &[channels, 1, kernel, kernel], kernel * kernel, rng),
            b: store.zeros(format!("{name}.bias"), ParamKind::Bias, channels),
            stride,
            padding: kernel / 2,
            depthwise: true,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = if self.depthwise {
            tape.depthwise_conv2d(x, p[self.w], self.stride, self.padding)?
        } else {
            tape.conv2d(x, p[self.w], self.stride, self.padding)?
        };
        tape.add_along(y, p[self.b], 1)
    }
}
