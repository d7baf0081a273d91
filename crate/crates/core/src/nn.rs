//! Parameterised building blocks: convolutions, linear maps, multi-head
//! attention and the token embedding/reconstruction pair used by the
//! global branches.
//!
//! Modules hold only [`ParamId`]s, so one module value works with any
//! store that was built by the same constructor calls (for example an
//! `f32` store and its `f64` cast).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{Init, ParamId, Scope};
use crate::scalar::Float;
use crate::tensor::ConvGeom;

/// Epsilon of every [`Graph::standardize`] call made by the modules.
pub const STD_EPS: f64 = 1e-5;

pub trait Module {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var>;
}

/// Shape of a 2D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding, with bias.
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            groups: 1,
            bias: true,
        }
    }

    /// Non-overlapping patch convolution: kernel = stride, no padding.
    pub fn patch(cin: usize, cout: usize, kh: usize, kw: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw),
            stride: (kh, kw),
            padding: (0, 0),
            ..Self::new(cin, cout, 1)
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.groups >= 1
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0
            && self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                path: "conv".into(),
                message: format!("invalid convolution spec {self:?}"),
            })
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel.0 * self.kernel.1
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(s, name, spec, Init::Uniform { fan_in: spec.fan_in() })
    }

    pub fn with_init<T: Float>(s: &mut Scope<'_, T>, name: &str, spec: ConvSpec, init: Init) -> Result<Self> {
        spec.validate()?;
        let mut s = s.sub(name);
        let (kh, kw) = spec.kernel;
        let weight = s.add(
            "weight",
            &[spec.out_channels, spec.in_channels / spec.groups, kh, kw],
            init,
        )?;
        let bias = if spec.bias {
            Some(s.add("bias", &[spec.out_channels], Init::Zero)?)
        } else {
            None
        };
        Ok(Conv2d { spec, weight, bias })
    }
}

impl Module for Conv2d {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = self.bias.map(|b| g.param(b)).transpose()?;
        g.conv2d(x, w, b, self.spec.geom())
    }
}

/// Transposed convolution with kernel = stride (non-overlapping tiles).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub kernel: (usize, usize),
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Float>(
        s: &mut Scope<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        let mut s = s.sub(name);
        let fan_in = cin * kernel.0 * kernel.1;
        let weight = s.add("weight", &[cin, cout, kernel.0, kernel.1], Init::Uniform { fan_in })?;
        let bias = s.add("bias", &[cout], Init::Zero)?;
        Ok(ConvTranspose2d { kernel, weight, bias })
    }
}

impl Module for ConvTranspose2d {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight)?, g.param(self.bias)?);
        let geom = ConvGeom::UNIT.with_stride(self.kernel.0, self.kernel.1);
        g.conv_transpose2d(x, w, Some(b), geom)
    }
}

/// Bias-free 1D convolution with "same" padding over `[N, C, L]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: usize,
    pub weight: ParamId,
}

impl Conv1d {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        let weight = s
            .sub(name)
            .add("weight", &[cout, cin, kernel], Init::Uniform { fan_in: cin * kernel })?;
        Ok(Conv1d { kernel, weight })
    }
}

impl Module for Conv1d {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        g.conv1d(x, w, None, self.kernel / 2)
    }
}

/// `y = x W + b` over the last axis, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let mut s = s.sub(name);
        let weight = s.add("weight", &[din, dout], Init::Uniform { fan_in: din })?;
        let bias = s.add("bias", &[dout], Init::Zero)?;
        Ok(Linear {
            weight,
            bias,
            out: dout,
        })
    }
}

impl Module for Linear {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight)?, g.param(self.bias)?);
        let y = g.matmul(x, w)?;
        let mut bshape = vec![1; g.shape(y).len()];
        *bshape.last_mut().expect("rank >= 2") = self.out;
        let b = g.reshape(b, &bshape)?;
        g.add(y, b)
    }
}

/// Convolution followed by ELU.
#[derive(Debug, Clone)]
pub struct ConvElu(pub Conv2d);

impl ConvElu {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(ConvElu(Conv2d::new(s, name, spec)?))
    }
}

impl Module for ConvElu {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.0.forward(g, x)?;
        g.elu(y)
    }
}

/// Attention geometry: `tokens` tokens of width `embed` split over `heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaSpec {
    pub tokens: usize,
    pub embed: usize,
    pub heads: usize,
}

impl MhaSpec {
    pub fn new(tokens: usize, embed: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::Config {
                path: "heads".into(),
                message: format!("embedding width {embed} not divisible by {heads} heads"),
            });
        }
        Ok(MhaSpec { tokens, embed, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    /// `(embed / heads)^-1/2`.
    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).powf(-0.5)
    }
}

/// Intermediate values of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaTrace {
    /// `[B, N, T, T]` attention weights.
    pub weights: Var,
    /// `[B, N, T, d]` value vectors.
    pub values: Var,
    /// `[B, T, E]` concatenated head outputs before projection.
    pub heads: Var,
    /// Projected attention output.
    pub x1: Var,
    pub out: Var,
}

/// Multi-head self-attention with a residual MLP:
/// `x2 = x + x1 + MLP(x + x1)`.
#[derive(Debug, Clone)]
pub struct Mha {
    pub spec: MhaSpec,
    pub qkv: Linear,
    pub proj: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Mha {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, spec: MhaSpec) -> Result<Self> {
        let mut s = s.sub(name);
        let e = spec.embed;
        Ok(Mha {
            spec,
            qkv: Linear::new(&mut s, "qkv", e, 3 * e)?,
            proj: Linear::new(&mut s, "proj", e, e)?,
            mlp_in: Linear::new(&mut s, "mlp_in", e, 4 * e)?,
            mlp_out: Linear::new(&mut s, "mlp_out", 4 * e, e)?,
        })
    }

    pub fn trace<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<MhaTrace> {
        let shape = g.shape(x).to_vec();
        let &[b, t, e] = &shape[..] else {
            return Err(Error::shape("mha", "[B, T, E]", &shape));
        };
        if e != self.spec.embed {
            return Err(Error::shape(
                "mha",
                format!("embedding width {}", self.spec.embed),
                &shape,
            ));
        }
        let (n, d) = (self.spec.heads, self.spec.head_dim());
        let qkv = self.qkv.forward(g, x)?;
        let parts = g.split(qkv, 2, &[e, e, e])?;
        let mut heads = Vec::with_capacity(3);
        for p in parts {
            let r = g.reshape(p, &[b, t, n, d])?;
            heads.push(g.permute(r, &[0, 2, 1, 3])?);
        }
        let (q, k, v) = (heads[0], heads[1], heads[2]);
        let kt = g.transpose(k, 2, 3)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.affine(logits, self.spec.scale(), 0.0);
        let weights = g.softmax(logits, 3)?;
        let o = g.matmul(weights, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let cat = g.reshape(o, &[b, t, e])?;
        let x1 = self.proj.forward(g, cat)?;
        let r = g.add(x, x1)?;
        let h = self.mlp_in.forward(g, r)?;
        let h = g.gelu(h)?;
        let m = self.mlp_out.forward(g, h)?;
        let out = g.add(r, m)?;
        Ok(MhaTrace {
            weights,
            values: v,
            heads: cat,
            x1,
            out,
        })
    }
}

impl Module for Mha {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, x)?.out)
    }
}

/// Splits a map into non-overlapping `sub` patches and embeds each as a
/// token: patch convolution, 1x1 convolution + ELU, flatten to `[B, T, E]`.
#[derive(Debug, Clone)]
pub struct TokenEmbed {
    pub sub: (usize, usize),
    pub patch: Conv2d,
    pub embed: Conv2d,
}

impl TokenEmbed {
    pub fn new<T: Float>(
        s: &mut Scope<'_, T>,
        name: &str,
        channels: usize,
        embed: usize,
        sub: (usize, usize),
    ) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(TokenEmbed {
            sub,
            patch: Conv2d::new(&mut s, "patch", ConvSpec::patch(channels, channels, sub.0, sub.1))?,
            embed: Conv2d::new(&mut s, "embed", ConvSpec::new(channels, embed, 1))?,
        })
    }
}

impl Module for TokenEmbed {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[2] % self.sub.0 != 0 || shape[3] % self.sub.1 != 0 {
            return Err(Error::shape(
                "embed_tokens",
                format!("NCHW map with extents divisible by {:?}", self.sub),
                &shape,
            ));
        }
        let p = self.patch.forward(g, x)?;
        let e = self.embed.forward(g, p)?;
        let e = g.elu(e)?;
        let s = g.shape(e).to_vec();
        let flat = g.reshape(e, &[s[0], s[1], s[2] * s[3]])?;
        g.permute(flat, &[0, 2, 1])
    }
}

/// Inverse of [`TokenEmbed`]'s layout: `[B, T, E]` tokens on a `grid`
/// back to a `[B, out, grid.0 * sub.0, grid.1 * sub.1]` map via a
/// transposed convolution with kernel = stride = `sub`.
#[derive(Debug, Clone)]
pub struct TokenToMap {
    pub grid: (usize, usize),
    pub deconv: ConvTranspose2d,
}

impl TokenToMap {
    pub fn new<T: Float>(
        s: &mut Scope<'_, T>,
        name: &str,
        embed: usize,
        out: usize,
        grid: (usize, usize),
        sub: (usize, usize),
    ) -> Result<Self> {
        Ok(TokenToMap {
            grid,
            deconv: ConvTranspose2d::new(s, name, embed, out, sub)?,
        })
    }
}

impl Module for TokenToMap {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (gh, gw) = self.grid;
        let &[b, t, e] = &shape[..] else {
            return Err(Error::shape("token_to_map", "[B, T, E]", &shape));
        };
        if t != gh * gw {
            return Err(Error::shape("token_to_map", format!("{} tokens", gh * gw), &shape));
        }
        let m = g.permute(x, &[0, 2, 1])?;
        let m = g.reshape(m, &[b, e, gh, gw])?;
        self.deconv.forward(g, m)
    }
}

/// Token grid for an `h x w` map cut into `sub` patches.
pub fn token_grid(h: usize, w: usize, sub: (usize, usize)) -> Result<(usize, usize)> {
    if sub.0 == 0 || sub.1 == 0 || h % sub.0 != 0 || w % sub.1 != 0 {
        return Err(Error::shape(
            "token_grid",
            format!("extents divisible by {sub:?}"),
            &[h, w],
        ));
    }
    Ok((h / sub.0, w / sub.1))
}
