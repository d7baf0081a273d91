//! Disparity heads and the disparity-to-depth map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{token_grid, Conv2d, ConvSpec, ConvTranspose2d, Mha, MhaSpec, Module, TokenEmbed};
use crate::param::Scope;
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Smallest and largest depth produced by [`disp_to_depth`].
pub const MIN_DEPTH_OUT: f64 = 1.0 / 10.01;
pub const MAX_DEPTH_OUT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispKind {
    AttDisp,
    Conv2dDisp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub sub: (usize, usize),
    pub embed: usize,
    pub heads: usize,
    pub kind: DispKind,
}

/// Locally regressed disparity gated by sigmoid attention from a global
/// token path.
#[derive(Debug, Clone)]
pub struct AttDisp {
    pub grid: (usize, usize),
    pub embed: TokenEmbed,
    pub mha: Mha,
    pub gc: Conv2d,
    pub to_att: ConvTranspose2d,
    pub local: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct AttDispTrace {
    pub d_local: Var,
    pub x_att: Var,
    pub out: Var,
}

impl AttDisp {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, cfg: &DispConfig) -> Result<Self> {
        let mut s = s.sub(name);
        let grid = token_grid(cfg.height, cfg.width, cfg.sub)?;
        let spec = MhaSpec::new(grid.0 * grid.1, cfg.embed, cfg.heads)?;
        Ok(AttDisp {
            grid,
            embed: TokenEmbed::new(&mut s, "embed", cfg.channels, cfg.embed, cfg.sub)?,
            mha: Mha::new(&mut s, "mha", spec)?,
            gc: Conv2d::new(&mut s, "gc", ConvSpec::new(cfg.embed, cfg.embed, 1))?,
            to_att: ConvTranspose2d::new(&mut s, "to_att", cfg.embed, 1, cfg.sub)?,
            local: Conv2d::new(&mut s, "local", ConvSpec::new(cfg.channels, 1, 3))?,
        })
    }

    pub fn trace<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<AttDispTrace> {
        let tokens = self.embed.forward(g, x)?;
        let t = self.mha.forward(g, tokens)?;
        let (b, e) = (g.shape(t)[0], g.shape(t)[2]);
        let m = g.permute(t, &[0, 2, 1])?;
        let m = g.reshape(m, &[b, e, self.grid.0, self.grid.1])?;
        let gc = self.gc.forward(g, m)?;
        let x_att = self.to_att.forward(g, gc)?;
        let l = self.local.forward(g, x)?;
        let d_local = g.sigmoid(l)?;
        let a = g.sigmoid(x_att)?;
        let out = g.mul(d_local, a)?;
        Ok(AttDispTrace { d_local, x_att, out })
    }
}

impl Module for AttDisp {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, x)?.out)
    }
}

/// `sigmoid(conv3x3(x))` to one channel.
#[derive(Debug, Clone)]
pub struct Conv2dDisp(pub Conv2d);

impl Module for Conv2dDisp {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.0.forward(g, x)?;
        g.sigmoid(y)
    }
}

#[derive(Debug, Clone)]
pub enum DispHead {
    Att(AttDisp),
    Conv(Conv2dDisp),
}

impl DispHead {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, cfg: &DispConfig) -> Result<Self> {
        Ok(match cfg.kind {
            DispKind::AttDisp => DispHead::Att(AttDisp::new(s, name, cfg)?),
            DispKind::Conv2dDisp => DispHead::Conv(Conv2dDisp(Conv2d::new(
                &mut s.sub(name),
                "local",
                ConvSpec::new(cfg.channels, 1, 3),
            )?)),
        })
    }
}

impl Module for DispHead {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            DispHead::Att(m) => m.forward(g, x),
            DispHead::Conv(m) => m.forward(g, x),
        }
    }
}

/// `1 / (10 disp + 0.01)`, defined for disparities in `[0, 1]`.
pub fn disp_to_depth<T: Float>(disp: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(bad) = disp.data().iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
        return Err(Error::Domain {
            op: "disp_to_depth",
            detail: format!("disparity {bad} outside [0, 1]"),
        });
    }
    let (a, b) = (T::of(10.0), T::of(0.01));
    Ok(disp.map(|d| (a * d + b).recip()))
}

/// `ln(disp_to_depth(disp))` recorded on the graph.
pub fn log_depth<T: Float>(g: &mut Graph<'_, T>, disp: Var) -> Result<Var> {
    let s = g.affine(disp, 10.0, 0.01);
    let l = g.ln(s)?;
    Ok(g.affine(l, -1.0, 0.0))
}
