//! Windowed multi-head self-attention over groups of pixels.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::layers::Linear;
use super::params::{Bound, ParamStore};

/// Attention inside non-overlapping `window × window` pixel groups, followed
/// by a residual connection. No positional encoding.
#[derive(Clone, Debug)]
pub struct PixelGroupAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl PixelGroupAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || window == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {channels} must be divisible by heads {heads}, window must be positive"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), channels, channels, rng),
            k: Linear::new(store, &format!("{name}.k"), channels, channels, rng),
            v: Linear::new(store, &format!("{name}.v"), channels, channels, rng),
            o: Linear::new(store, &format!("{name}.o"), channels, channels, rng),
            channels,
            heads,
            window,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape("pixel_group_attention", &s, &[0, self.channels, 0, 0]));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let win = self.window;
        if h % win != 0 || w % win != 0 {
            return Err(Error::Config(format!(
                "pixel_group_attention: feature map H={h}, W={w} not divisible by window w={win}"
            )));
        }
        let (nh, nw) = (h / win, w / win);
        let groups = b * nh * nw;
        let tokens = win * win;
        let (heads, d) = (self.heads, c / self.heads);

        // (B,C,nh,w,nw,w) → (B,nh,nw,w,w,C) → (N,C)
        let t = tape.reshape(x, &[b, c, nh, win, nw, win])?;
        let t = tape.permute(t, &[0, 2, 4, 3, 5, 1])?;
        let t = tape.reshape(t, &[groups * tokens, c])?;

        let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[groups, tokens, heads, d])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[groups * heads, tokens, d])
        };
        let q = self.q.forward(tape, p, t)?;
        let q = split(tape, q)?;
        let k = self.k.forward(tape, p, t)?;
        let k = split(tape, k)?;
        let v = self.v.forward(tape, p, t)?;
        let v = split(tape, v)?;

        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()))?;
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(attn, v)?;

        let ctx = tape.reshape(ctx, &[groups, heads, tokens, d])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[groups * tokens, c])?;
        let out = self.o.forward(tape, p, ctx)?;

        let out = tape.reshape(out, &[b, nh, nw, win, win, c])?;
        let out = tape.permute(out, &[0, 5, 1, 3, 2, 4])?;
        let out = tape.reshape(out, &[b, c, h, w])?;
        tape.add(x, out)
    }
}
