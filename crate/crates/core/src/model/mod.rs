//! Raster encoder, recurrent trajectory decoder and their training loss.
//!
//! ```text
//! raster ─ stem ─ 4 stages ─ [attention] ─ avg pool ─ linear ─ z0
//! z_t = gru(y_{t−1} / scale, z_{t−1}),  y_0 = 0
//! mu_t = scale · (z_t · W_mu) + b_mu,  scale params_t = z_t · W_s + b_s
//! ```

mod checkpoint;
mod config;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BackbonePreset, HeadKind, LossWeights, ModelConfig};
pub use loss::{combined_loss, nll, LossTerms, LOG_2PI};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, DwsBlock, GruCell, Linear, NfBlock, ParamKind, ParamStore, PixelGroupAttention, WsConv, NF_ALPHA};
use crate::scalar::Scalar;
use crate::scene::{SceneSample, HORIZON};
use crate::tensor::Tensor;

/// Bounds applied to log-scale head outputs before exponentiation.
pub const LOG_SCALE_CLAMP: (f64, f64) = (-5.0, 5.0);

#[derive(Clone, Debug)]
enum Stem {
    Ws(WsConv),
    Plain(Conv),
}

#[derive(Clone, Debug)]
enum Block {
    Nf(NfBlock),
    Dws(DwsBlock),
}

#[derive(Clone, Debug)]
struct Arch {
    stem: Stem,
    blocks: Vec<Block>,
    attention: Option<PixelGroupAttention>,
    proj: Linear,
    gru: GruCell,
    mu_w: crate::nn::ParamId,
    mu_b: crate::nn::ParamId,
    scale_head: Linear,
}

/// How the decoder chooses `y_{t−1}` for the next step.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a, T> {
    /// Feed the given `(B, T, 2)` trajectory.
    TeacherForced(&'a Tensor<T>),
    /// Feed the predicted mean.
    Mean,
    /// Feed a draw from each step's Gaussian, seeded.
    Sample(u64),
}

/// What the decoder consumes as `y_{t−1}` during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feed {
    /// Ground truth.
    TeacherForced,
    /// The model's own mean, differentiated through.
    #[default]
    FreeRunning,
}

impl Feed {
    pub fn name(self) -> &'static str {
        match self {
            Feed::TeacherForced => "teacher-forced",
            Feed::FreeRunning => "free-running",
        }
    }
}

impl std::str::FromStr for Feed {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher-forced" | "teacher" => Ok(Feed::TeacherForced),
            "free-running" | "free" => Ok(Feed::FreeRunning),
            _ => Err(Error::Config(format!("unknown feed '{s}' (teacher-forced | free-running)"))),
        }
    }
}

/// Tape handles of one decoded batch.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `(B, T, 2)` means in meters.
    pub mu: Var,
    /// `(B, T, 2)` log sigmas (BC) or `(B, T, 3)` `[log l11, l21, log l22]` (DIM).
    pub scale: Var,
    /// `(B, T, 2)` trajectory fed back through the decoder.
    pub realized: Var,
}

/// Per-step Gaussian over a trajectory, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTrajectory<T> {
    pub head: HeadKind,
    pub mu: Tensor<T>,
    pub scale: Tensor<T>,
}

impl<T: Scalar> GaussianTrajectory<T> {
    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.mu.shape()[1]
    }

    /// Means of batch element `b`.
    pub fn mean_path(&self, b: usize) -> Vec<[f64; 2]> {
        let t = self.horizon();
        self.mu.data()[b * t * 2..(b + 1) * t * 2]
            .chunks(2)
            .map(|p| [p[0].as_f64(), p[1].as_f64()])
            .collect()
    }

    /// Scale parameters of batch element `b` in natural units: `[σx, σy]`
    /// (BC) or `[l11, l21, l22]` (DIM).
    pub fn scales(&self, b: usize) -> Vec<Vec<f64>> {
        let w = self.head.scale_width();
        let t = self.horizon();
        self.scale.data()[b * t * w..(b + 1) * t * w]
            .chunks(w)
            .map(|s| match self.head {
                HeadKind::Bc => vec![s[0].as_f64().exp(), s[1].as_f64().exp()],
                HeadKind::Dim => vec![s[0].as_f64().exp(), s[1].as_f64(), s[2].as_f64().exp()],
            })
            .collect()
    }
}

/// Encoder-decoder model with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

impl<T: Scalar> Model<T> {
    /// Builds the architecture with He fan-in normal weights, zero biases and
    /// unit gains drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let widths = cfg.widths();
        let nf = cfg.backbone != BackbonePreset::DwsBaseline;

        let stem = if nf {
            Stem::Ws(WsConv::new(&mut store, "stem", cfg.channels, widths[0], 3, 2, rng))
        } else {
            Stem::Plain(Conv::new(&mut store, "stem", cfg.channels, widths[0], 3, 2, rng))
        };

        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (s, (&depth, &cout)) in cfg.backbone.depths().iter().zip(&widths).enumerate() {
            let mut var = 1.0f64;
            for i in 0..depth {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{i}");
                let block = if nf {
                    let b = NfBlock::new(&mut store, &name, cin, cout, stride, NF_ALPHA, 1.0 / var.sqrt(), rng)?;
                    // A projection skip restarts the signal at unit variance.
                    var = if b.skip.is_some() { 1.0 } else { var } + NF_ALPHA * NF_ALPHA;
                    Block::Nf(b)
                } else {
                    Block::Dws(DwsBlock::new(&mut store, &name, cin, cout, stride, rng)?)
                };
                blocks.push(block);
                cin = cout;
            }
        }

        let attention = if cfg.attention {
            Some(PixelGroupAttention::new(&mut store, "attention", cin, cfg.heads, cfg.window, rng)?)
        } else {
            None
        };
        let proj = Linear::new(&mut store, "proj", cin, cfg.hidden, rng);
        let gru = GruCell::new(&mut store, "gru", 2, cfg.hidden, rng);
        let mu_w = store.he("head.mu.weight", &[cfg.hidden, 2], cfg.hidden, rng);
        let mu_b = store.zeros("head.mu.bias", ParamKind::Bias, 2);
        let scale_head = Linear::new(&mut store, "head.scale", cfg.hidden, cfg.head.scale_width(), rng);

        Ok(Self {
            cfg,
            params: store,
            arch: Arch {
                stem,
                blocks,
                attention,
                proj,
                gru,
                mu_w,
                mu_b,
                scale_head,
            },
        })
    }

    /// Same architecture with parameters converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.kind, p.value.cast());
        }
        Model {
            cfg: self.cfg.clone(),
            params,
            arch: self.arch.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        self.params.bind(tape, requires_grad)
    }

    pub fn head_mu_ids(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.arch.mu_w, self.arch.mu_b)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[1..] != [c.channels, c.raster_size, c.raster_size] {
            return Err(Error::shape("encode", shape, &[0, c.channels, c.raster_size, c.raster_size]));
        }
        Ok(())
    }

    /// `(B, C, S, S)` rasters → `(B, K)` initial decoder state.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let a = &self.arch;
        let mut h = match &a.stem {
            Stem::Ws(c) => c.forward(tape, p, x)?,
            Stem::Plain(c) => {
                let h = c.forward(tape, p, x)?;
                tape.relu(h)?
            }
        };
        for b in &a.blocks {
            h = match b {
                Block::Nf(b) => b.forward(tape, p, h)?,
                Block::Dws(b) => b.forward(tape, p, h)?,
            };
        }
        if let Some(att) = &a.attention {
            h = att.forward(tape, p, h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        a.proj.forward(tape, p, pooled)
    }

    fn head(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let a = &self.arch;
        let raw = tape.matmul(z, p[a.mu_w])?;
        let raw = tape.scale(raw, T::lit(self.cfg.output_scale))?;
        let mu = tape.add_along(raw, p[a.mu_b], 1)?;
        let s = a.scale_head.forward(tape, p, z)?;
        let (lo, hi) = (T::lit(LOG_SCALE_CLAMP.0), T::lit(LOG_SCALE_CLAMP.1));
        let scale = match self.cfg.head {
            HeadKind::Bc => tape.clamp(s, lo, hi)?,
            HeadKind::Dim => {
                let l11 = tape.slice(s, 1, 0, 1)?;
                let l11 = tape.clamp(l11, lo, hi)?;
                let l21 = tape.slice(s, 1, 1, 1)?;
                let l22 = tape.slice(s, 1, 2, 1)?;
                let l22 = tape.clamp(l22, lo, hi)?;
                tape.concat(&[l11, l21, l22], 1)?
            }
        };
        Ok((mu, scale))
    }

    /// Unrolls the decoder for `HORIZON` steps from `z0`.
    pub fn decode(&self, tape: &mut Tape<T>, p: &Bound, z0: Var, mode: DecodeMode<'_, T>) -> Result<Decoded> {
        let b = tape.shape(z0)[0];
        let t_len = HORIZON;
        let gt = match mode {
            DecodeMode::TeacherForced(y) => {
                if y.shape() != [b, t_len, 2] {
                    return Err(Error::shape("decode", y.shape(), &[b, t_len, 2]));
                }
                Some(y)
            }
            _ => None,
        };
        let mut rng = match mode {
            DecodeMode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let w = self.cfg.head.scale_width();
        let inv_scale = T::lit(1.0 / self.cfg.output_scale);

        let mut y_prev = tape.constant(Tensor::zeros(&[b, 2]));
        let mut z = z0;
        let (mut mus, mut scales, mut realized) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..t_len {
            let inp = tape.scale(y_prev, inv_scale)?;
            z = self.arch.gru.forward(tape, p, inp, z)?;
            let (mu, scale) = self.head(tape, p, z)?;
            let y = match (gt, rng.as_mut()) {
                (Some(gt), _) => {
                    let step: Vec<T> = (0..b)
                        .flat_map(|i| {
                            let o = (i * t_len + t) * 2;
                            [gt.data()[o], gt.data()[o + 1]]
                        })
                        .collect();
                    tape.constant(Tensor::new(&[b, 2], step)?)
                }
                (None, Some(rng)) => {
                    let draw = sample_step(self.cfg.head, tape.value(mu), tape.value(scale), rng)?;
                    tape.constant(draw)
                }
                (None, None) => mu,
            };
            mus.push(tape.reshape(mu, &[b, 1, 2])?);
            scales.push(tape.reshape(scale, &[b, 1, w])?);
            realized.push(tape.reshape(y, &[b, 1, 2])?);
            y_prev = y;
        }
        Ok(Decoded {
            mu: tape.concat(&mus, 1)?,
            scale: tape.concat(&scales, 1)?,
            realized: tape.concat(&realized, 1)?,
        })
    }

    /// Training loss. Distance terms are taken on the means.
    pub fn loss(&self, tape: &mut Tape<T>, p: &Bound, x: Var, y: &Tensor<T>, feed: Feed) -> Result<LossTerms> {
        let z0 = self.encode(tape, p, x)?;
        let mode = match feed {
            Feed::TeacherForced => DecodeMode::TeacherForced(y),
            Feed::FreeRunning => DecodeMode::Mean,
        };
        let d = self.decode(tape, p, z0, mode)?;
        let yv = tape.constant(y.clone());
        combined_loss(tape, self.cfg.head, d.mu, d.scale, d.mu, yv, &self.cfg.loss)
    }

    /// Gradient-free decode of a batch of rasters.
    pub fn predict(&self, x: &Tensor<T>, mode: DecodeMode<'_, T>) -> Result<(GaussianTrajectory<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z0 = self.encode(&mut tape, &p, xv)?;
        let d = self.decode(&mut tape, &p, z0, mode)?;
        Ok((self.detach(&tape, &d), tape.value(d.realized).clone()))
    }

    /// Initial decoder states for a batch of rasters, without gradients.
    pub fn encode_values(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z0 = self.encode(&mut tape, &p, xv)?;
        Ok(tape.value(z0).clone())
    }

    /// Decodes from given `(B, K)` states, without gradients.
    pub fn decode_values(&self, z0: &Tensor<T>, mode: DecodeMode<'_, T>) -> Result<(GaussianTrajectory<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(z0.clone());
        let d = self.decode(&mut tape, &p, zv, mode)?;
        Ok((self.detach(&tape, &d), tape.value(d.realized).clone()))
    }

    fn detach(&self, tape: &Tape<T>, d: &Decoded) -> GaussianTrajectory<T> {
        GaussianTrajectory {
            head: self.cfg.head,
            mu: tape.value(d.mu).clone(),
            scale: tape.value(d.scale).clone(),
        }
    }

    /// Mean per-step log-likelihood `−NLL / T` of each `(T, 2)` candidate,
    /// teacher-forced through the decoder from state `z0` (`(1, K)`).
    pub fn score_candidates(&self, z0: &Tensor<T>, candidates: &[Vec<[f64; 2]>]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let g = candidates.len();
        let k = self.cfg.hidden;
        if z0.shape() != [1, k] {
            return Err(Error::shape("score_candidates", z0.shape(), &[1, k]));
        }
        let mut ys = Vec::with_capacity(g * HORIZON * 2);
        for c in candidates {
            if c.len() != HORIZON {
                return Err(Error::shape("score_candidates", &[c.len(), 2], &[HORIZON, 2]));
            }
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault { op: "score_candidates" });
            }
            ys.extend(c.iter().flat_map(|p| [T::lit(p[0]), T::lit(p[1])]));
        }
        let y = Tensor::new(&[g, HORIZON, 2], ys)?;
        let zs = Tensor::new(&[g, k], z0.data().repeat(g))?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(zs);
        let d = self.decode(&mut tape, &p, zv, DecodeMode::TeacherForced(&y))?;
        let yv = tape.constant(y);
        let n = nll(&mut tape, self.cfg.head, d.mu, d.scale, yv)?;
        Ok(tape.value(n).data().iter().map(|v| -v.as_f64() / HORIZON as f64).collect())
    }
}

/// One draw per batch row from a step's Gaussian.
fn sample_step<T: Scalar>(head: HeadKind, mu: &Tensor<T>, scale: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let b = mu.shape()[0];
    let w = head.scale_width();
    let mut out = Vec::with_capacity(b * 2);
    for i in 0..b {
        let e1: f64 = StandardNormal.sample(rng);
        let e2: f64 = StandardNormal.sample(rng);
        let m = &mu.data()[i * 2..i * 2 + 2];
        let s = &scale.data()[i * w..(i + 1) * w];
        let (d1, d2) = match head {
            HeadKind::Bc => (s[0].as_f64().exp() * e1, s[1].as_f64().exp() * e2),
            HeadKind::Dim => (s[0].as_f64().exp() * e1, s[1].as_f64() * e1 + s[2].as_f64().exp() * e2),
        };
        out.push(m[0] + T::lit(d1));
        out.push(m[1] + T::lit(d2));
    }
    let t = Tensor::new(&[b, 2], out)?;
    if !t.all_finite() {
        return Err(Error::NumericFault { op: "sample" });
    }
    Ok(t)
}

/// Stacks rasters and futures of `samples` into `(B, C, S, S)` and `(B, T, 2)`.
pub fn batch_tensors<T: Scalar>(samples: &[&SceneSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let rs = first.raster.shape().to_vec();
    let t = first.future.len();
    let mut x = Vec::with_capacity(samples.len() * first.raster.numel());
    let mut y = Vec::with_capacity(samples.len() * t * 2);
    for s in samples {
        if s.raster.shape() != rs.as_slice() || s.future.len() != t {
            return Err(Error::shape("batch", &rs, s.raster.shape()));
        }
        x.extend(s.raster.data().iter().map(|&v| T::lit(v as f64)));
        y.extend(s.future.iter().flat_map(|p| [T::lit(p[0] as f64), T::lit(p[1] as f64)]));
    }
    let mut xs = vec![samples.len()];
    xs.extend_from_slice(&rs);
    Ok((Tensor::new(&xs, x)?, Tensor::new(&[samples.len(), t, 2], y)?))
}

/// Convenience aliases.
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
