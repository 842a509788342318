//! UPN function approximators and the RIL / AIL baselines.
//!
//! All networks take batches: images as `[B, C, H, W]` with pixels already
//! scaled, vectors as `[B, width]`. Weights are `[in, out]`, biases `[1, out]`
//! (or `[1, O, 1, 1]` for convolutions) and are broadcast explicitly.

mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::worlds::Image;

pub use params::{Bound, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

const fn conv(out_channels: usize, kernel: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        out_channels,
        kernel,
        stride,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub conv: Vec<ConvSpec>,
    /// Fully connected widths after the conv stack; the last is the latent
    /// width D.
    pub fc: Vec<usize>,
    pub pixel_scale: f64,
}

impl EncoderConfig {
    /// 84x84x3 input, conv (32,8,4) (64,4,2) (64,3,1) (16,2,1), fc 128, 128.
    pub fn full() -> Self {
        EncoderConfig {
            image_size: 84,
            in_channels: 3,
            conv: vec![conv(32, 8, 4), conv(64, 4, 2), conv(64, 3, 1), conv(16, 2, 1)],
            fc: vec![128, 128],
            pixel_scale: 1.0 / 255.0,
        }
    }

    /// Reduced desk preset: 42x42 input, first layer (kernel 8, stride 4)
    /// rescaled to (4, 2), narrower layers.
    pub fn desk() -> Self {
        EncoderConfig {
            image_size: 42,
            in_channels: 3,
            conv: vec![conv(16, 4, 2), conv(32, 4, 2), conv(32, 3, 1), conv(8, 2, 1)],
            fc: vec![64, 64],
            pixel_scale: 1.0 / 255.0,
        }
    }

    pub fn latent_dim(&self) -> usize {
        *self.fc.last().unwrap_or(&0)
    }

    /// `[C, H, W]` after the conv stack.
    pub fn conv_out_shape(&self) -> Result<[usize; 3]> {
        let (mut c, mut s) = (self.in_channels, self.image_size);
        for (i, l) in self.conv.iter().enumerate() {
            if l.stride == 0 || l.kernel == 0 || s < l.kernel {
                return Err(Error::Config(format!(
                    "conv layer {i} (kernel {}, stride {}) does not fit a {s}x{s} input",
                    l.kernel, l.stride
                )));
            }
            s = (s - l.kernel) / l.stride + 1;
            c = l.out_channels;
        }
        Ok([c, s, s])
    }

    pub fn flat_dim(&self) -> Result<usize> {
        Ok(self.conv_out_shape()?.iter().product())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub latent_dim: usize,
    pub action_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub dynamics: DynamicsConfig,
    pub embodiment_dim: usize,
    pub action_dim: usize,
    pub bias_width: usize,
    pub bias_init: f64,
    pub ln_eps: f64,
    /// RIL hidden layers.
    pub ril_hidden: Vec<usize>,
    /// AIL recurrent state width.
    pub ail_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetConfig {
    pub fn full() -> Self {
        NetConfig {
            encoder: EncoderConfig::full(),
            dynamics: DynamicsConfig {
                latent_dim: 128,
                action_width: 64,
            },
            embodiment_dim: 4,
            action_dim: 2,
            bias_width: 20,
            bias_init: 0.1,
            ln_eps: 1e-5,
            ril_hidden: vec![128, 128],
            ail_hidden: 128,
        }
    }

    /// Reduced desk preset matched to [`EncoderConfig::desk`].
    pub fn desk() -> Self {
        NetConfig {
            encoder: EncoderConfig::desk(),
            dynamics: DynamicsConfig {
                latent_dim: 64,
                action_width: 32,
            },
            ril_hidden: vec![64, 64],
            ail_hidden: 64,
            ..Self::full()
        }
    }

    /// Minimal network (10x10 input, D = 4) for gradient oracles.
    pub fn tiny() -> Self {
        NetConfig {
            encoder: EncoderConfig {
                image_size: 10,
                in_channels: 3,
                conv: vec![conv(2, 4, 2), conv(3, 2, 1)],
                fc: vec![5, 4],
                pixel_scale: 1.0 / 255.0,
            },
            dynamics: DynamicsConfig {
                latent_dim: 4,
                action_width: 3,
            },
            embodiment_dim: 4,
            action_dim: 2,
            bias_width: 3,
            bias_init: 0.1,
            ln_eps: 1e-5,
            ril_hidden: vec![5],
            ail_hidden: 4,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.dynamics.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.conv_out_shape()?;
        if self.encoder.latent_dim() != self.dynamics.latent_dim {
            return Err(Error::Config(format!(
                "encoder latent width {} differs from dynamics width {}",
                self.encoder.latent_dim(),
                self.dynamics.latent_dim
            )));
        }
        if self.action_dim == 0 || self.embodiment_dim == 0 || self.dynamics.action_width == 0 {
            return Err(Error::Config("zero-width action or embodiment".into()));
        }
        Ok(())
    }

    /// Encoder config for the two-image baselines.
    pub fn pair_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 2 * self.encoder.in_channels,
            ..self.encoder.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Upn,
    Ril,
    Ail,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "upn" => Ok(ModelKind::Upn),
            "ril" => Ok(ModelKind::Ril),
            "ail" => Ok(ModelKind::Ail),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Upn => "upn",
            ModelKind::Ril => "ril",
            ModelKind::Ail => "ail",
        })
    }
}

fn init_dense<T: Real, R: Rng + ?Sized>(p: &mut ParameterSet<T>, name: &str, fan_in: usize, out: usize, rng: &mut R) -> Result<()> {
    p.init_fan_in(format!("{name}.w"), &[fan_in, out], fan_in, rng)?;
    p.init_fan_in(format!("{name}.b"), &[1, out], fan_in, rng)
}

fn init_ln<T: Real>(p: &mut ParameterSet<T>, name: &str, width: usize) -> Result<()> {
    p.insert(format!("{name}.g"), Tensor::ones([1, width]))?;
    p.insert(format!("{name}.b"), Tensor::zeros([1, width]))
}

fn init_encoder<T: Real, R: Rng + ?Sized>(p: &mut ParameterSet<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    let mut c = cfg.in_channels;
    for (i, l) in cfg.conv.iter().enumerate() {
        let fan_in = c * l.kernel * l.kernel;
        p.init_fan_in(format!("{prefix}.conv{i}.w"), &[l.out_channels, c, l.kernel, l.kernel], fan_in, rng)?;
        p.init_fan_in(format!("{prefix}.conv{i}.b"), &[1, l.out_channels, 1, 1], fan_in, rng)?;
        c = l.out_channels;
    }
    let mut width = cfg.flat_dim()?;
    for (i, &out) in cfg.fc.iter().enumerate() {
        init_dense(p, &format!("{prefix}.fc{i}"), width, out, rng)?;
        init_ln(p, &format!("{prefix}.ln{i}"), out)?;
        width = out;
    }
    Ok(())
}

/// Fresh parameters for `kind`, fan-in scaled uniform weights, unit
/// layer-norm gains, zero layer-norm shifts.
pub fn init_params<T: Real, R: Rng + ?Sized>(cfg: &NetConfig, kind: ModelKind, rng: &mut R) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut p = ParameterSet::new();
    let d = cfg.latent_dim();
    match kind {
        ModelKind::Upn => {
            init_encoder(&mut p, "enc", &cfg.encoder, rng)?;
            let fused_in = d + cfg.embodiment_dim + cfg.bias_width;
            init_dense(&mut p, "fuse.fc", fused_in, d, rng)?;
            init_ln(&mut p, "fuse.ln", d)?;
            p.insert("bias_transform", Tensor::full([1, cfg.bias_width], T::of(cfg.bias_init)))?;
            let u = cfg.dynamics.action_width;
            init_dense(&mut p, "act.fc", cfg.action_dim, u, rng)?;
            init_ln(&mut p, "act.ln", u)?;
            init_dense(&mut p, "dyn.fc", d + u, d, rng)?;
            init_ln(&mut p, "dyn.ln", d)?;
        }
        ModelKind::Ril => {
            init_encoder(&mut p, "enc", &cfg.pair_encoder(), rng)?;
            let mut width = d + cfg.embodiment_dim;
            for (i, &h) in cfg.ril_hidden.iter().enumerate() {
                init_dense(&mut p, &format!("ril.fc{i}"), width, h, rng)?;
                width = h;
            }
            init_dense(&mut p, "ril.out", width, cfg.action_dim, rng)?;
        }
        ModelKind::Ail => {
            init_encoder(&mut p, "enc", &cfg.pair_encoder(), rng)?;
            let h = cfg.ail_hidden;
            init_dense(&mut p, "ail.init", d + cfg.embodiment_dim, h, rng)?;
            p.init_fan_in("ail.wx".into(), &[cfg.action_dim, h], h + cfg.action_dim, rng)?;
            init_dense(&mut p, "ail.wh", h, h, rng)?;
            init_dense(&mut p, "ail.out", h, cfg.action_dim, rng)?;
        }
    }
    Ok(p)
}

/// Stacks RGB images into `[B, 3, H, W]`, multiplying pixels by `scale`.
pub fn images_to_tensor<T: Real>(images: &[&Image], scale: f64) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "image batch mixes {h}x{w} and {}x{}",
                img.height, img.width
            )));
        }
        push_chw(&mut data, img, scale);
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Channel-concatenated `(o_t, o_g)` pairs as `[B, 6, H, W]`.
pub fn image_pairs_to_tensor<T: Real>(pairs: &[(&Image, &Image)], scale: f64) -> Result<Tensor<T>> {
    let (h, w) = pairs
        .first()
        .map(|(a, _)| (a.height, a.width))
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let mut data = Vec::with_capacity(pairs.len() * 6 * h * w);
    for (a, b) in pairs {
        if (a.height, a.width) != (h, w) || (b.height, b.width) != (h, w) {
            return Err(Error::InvalidArgument("image pair sizes differ".into()));
        }
        push_chw(&mut data, a, scale);
        push_chw(&mut data, b, scale);
    }
    Tensor::new(vec![pairs.len(), 6, h, w], data)
}

fn push_chw<T: Real>(data: &mut Vec<T>, img: &Image, scale: f64) {
    for c in 0..3 {
        data.extend(img.data.iter().skip(c).step_by(3).map(|&v| T::of(v as f64 * scale)));
    }
}

/// Rows of `[B, width]` from plain vectors.
pub fn rows_to_tensor<T: Real>(rows: &[Vec<f64>]) -> Result<Tensor<T>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidArgument("ragged rows".into()));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(vec![rows.len(), width], &data)
}

/// `x W + b` for `x: [B, in]`.
pub fn dense<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    let shape = g.shape(y).to_vec();
    let bb = g.broadcast(b, &shape)?;
    g.add(y, bb)
}

/// Layer norm over the last axis with learned gain and shift.
pub fn layer_norm_affine<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = p.get(&format!("{name}.g"))?;
    let shift = p.get(&format!("{name}.b"))?;
    let y = g.layer_norm(x, T::of(eps))?;
    let shape = g.shape(y).to_vec();
    let gb = g.broadcast(gain, &shape)?;
    let sb = g.broadcast(shift, &shape)?;
    let y = g.mul(y, gb)?;
    g.add(y, sb)
}

fn dense_ln_swish<T: Real>(g: &mut Graph<T>, p: &Bound, fc: &str, ln: &str, x: Var, eps: f64) -> Result<Var> {
    let y = dense(g, p, fc, x)?;
    let y = layer_norm_affine(g, p, ln, y, eps)?;
    Ok(g.swish(y))
}

fn check_width<T: Real>(g: &Graph<T>, x: Var, width: usize, what: &str) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::InvalidArgument(format!("{what}: expected [B, {width}], got {s:?}")));
    }
    Ok(s[0])
}

/// `f_phi`: conv stack with swish, then fully connected + layer norm +
/// swish blocks. `o` is `[B, C, H, W]` with scaled pixels.
pub fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, eps: f64, o: Var) -> Result<Var> {
    let s = g.shape(o).to_vec();
    let want = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::InvalidArgument(format!("encoder expects [B, {want:?}], got {s:?}")));
    }
    let batch = s[0];
    let mut h = o;
    for (i, l) in cfg.conv.iter().enumerate() {
        let w = p.get(&format!("enc.conv{i}.w"))?;
        let b = p.get(&format!("enc.conv{i}.b"))?;
        let y = g.conv2d(h, w, l.stride)?;
        let shape = g.shape(y).to_vec();
        let bb = g.broadcast(b, &shape)?;
        let y = g.add(y, bb)?;
        h = g.swish(y);
    }
    let flat = cfg.flat_dim()?;
    h = g.reshape(h, &[batch, flat])?;
    for i in 0..cfg.fc.len() {
        h = dense_ln_swish(g, p, &format!("enc.fc{i}"), &format!("enc.ln{i}"), h, eps)?;
    }
    Ok(h)
}

/// Concatenates `x_t`, `q_t` and the tiled bias transformation and projects
/// back to the latent width.
pub fn fuse_embodiment<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, x: Var, q: Var) -> Result<Var> {
    let batch = check_width(g, x, cfg.latent_dim(), "fuse_embodiment latent")?;
    let qb = check_width(g, q, cfg.embodiment_dim, "fuse_embodiment embodiment")?;
    if qb != batch {
        return Err(Error::InvalidArgument(format!("batch sizes differ: {batch} vs {qb}")));
    }
    let b = p.get("bias_transform")?;
    let tiled = g.broadcast(b, &[batch, cfg.bias_width])?;
    let joint = g.concat(&[x, q, tiled], 1)?;
    dense_ln_swish(g, p, "fuse.fc", "fuse.ln", joint, cfg.ln_eps)
}

/// Action encoder: `[B, action_dim] -> [B, U]`.
pub fn encode_action<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, a: Var) -> Result<Var> {
    check_width(g, a, cfg.action_dim, "encode_action")?;
    dense_ln_swish(g, p, "act.fc", "act.ln", a, cfg.ln_eps)
}

/// One latent step `g_theta(x, u)`.
pub fn dynamics_step<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, x: Var, u: Var) -> Result<Var> {
    check_width(g, x, cfg.latent_dim(), "dynamics_step latent")?;
    check_width(g, u, cfg.dynamics.action_width, "dynamics_step action code")?;
    let joint = g.concat(&[x, u], 1)?;
    dense_ln_swish(g, p, "dyn.fc", "dyn.ln", joint, cfg.ln_eps)
}

fn pair_features<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, pair: Var, q: Var) -> Result<Var> {
    let x = encode(g, p, &cfg.pair_encoder(), cfg.ln_eps, pair)?;
    let batch = g.shape(x)[0];
    if check_width(g, q, cfg.embodiment_dim, "baseline embodiment")? != batch {
        return Err(Error::InvalidArgument("baseline batch sizes differ".into()));
    }
    g.concat(&[x, q], 1)
}

/// Reactive baseline: `pair` is `[B, 6, H, W]`, output `[B, action_dim]`.
pub fn ril_forward<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, pair: Var, q: Var) -> Result<Var> {
    let mut h = pair_features(g, p, cfg, pair, q)?;
    for i in 0..cfg.ril_hidden.len() {
        let y = dense(g, p, &format!("ril.fc{i}"), h)?;
        h = g.swish(y);
    }
    dense(g, p, "ril.out", h)
}

/// Autoregressive baseline: a tanh recurrent cell whose state starts from
/// the encoded pair and embodiment and whose input is the previous action.
/// Returns `horizon` tensors of shape `[B, action_dim]`.
pub fn ail_forward<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, pair: Var, q: Var, horizon: usize) -> Result<Vec<Var>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("AIL horizon must be >= 1".into()));
    }
    let feats = pair_features(g, p, cfg, pair, q)?;
    let batch = g.shape(feats)[0];
    let init = dense(g, p, "ail.init", feats)?;
    let mut h = g.tanh(init);
    let wx = p.get("ail.wx")?;
    let mut prev = g.constant(Tensor::zeros([batch, cfg.action_dim]));
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let rec = dense(g, p, "ail.wh", h)?;
        let inp = g.matmul(prev, wx)?;
        let pre = g.add(rec, inp)?;
        h = g.tanh(pre);
        let a = dense(g, p, "ail.out", h)?;
        out.push(a);
        prev = a;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
