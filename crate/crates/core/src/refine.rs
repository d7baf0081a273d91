//! Adaptive refinement: a local convolutional branch and a global
//! attention branch, each added to the input through a zero-initialised
//! spatial gate (or added directly in the non-adaptive form).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{token_grid, Conv2d, ConvElu, ConvSpec, Mha, MhaSpec, Module, TokenEmbed, TokenToMap};
use crate::param::{Init, ParamId, Scope};
use crate::scalar::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefineKind {
    /// Gated fusion `X + P1*X3 + P2*X5`.
    AdaRm,
    /// Direct fusion `X + X3 + X5`.
    Rm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub squeeze: usize,
    pub sub: (usize, usize),
    pub embed: usize,
    pub heads: usize,
    pub kind: RefineKind,
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(Error::Config {
                path: "refine".into(),
                message,
            })
        };
        if self.squeeze == 0 || self.channels % self.squeeze != 0 {
            return fail(format!(
                "{} channels not divisible by squeeze ratio {}",
                self.channels, self.squeeze
            ));
        }
        if token_grid(self.height, self.width, self.sub).is_err() {
            return fail(format!(
                "{}x{} map not divisible into {:?} patches",
                self.height, self.width, self.sub
            ));
        }
        MhaSpec::new(1, self.embed, self.heads).map(|_| ())
    }

    pub fn squeezed(&self) -> usize {
        self.channels / self.squeeze
    }
}

#[derive(Debug, Clone)]
pub struct Refine {
    pub cfg: RefineConfig,
    pub squeeze: ConvElu,
    pub local: ConvElu,
    pub unsqueeze: Conv2d,
    pub embed: TokenEmbed,
    pub mha: Mha,
    pub to_map: TokenToMap,
    pub expand: Conv2d,
    /// `(P1, P2)`, each `[H, W]`; absent for the direct form.
    pub gates: Option<(ParamId, ParamId)>,
}

impl Refine {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, cfg: RefineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = s.sub(name);
        let (c, cs) = (cfg.channels, cfg.squeezed());
        let grid = token_grid(cfg.height, cfg.width, cfg.sub)?;
        let spec = MhaSpec::new(grid.0 * grid.1, cfg.embed, cfg.heads)?;
        let squeeze = ConvElu::new(&mut s, "squeeze", ConvSpec::new(c, cs, 1))?;
        let local = ConvElu::new(&mut s, "local", ConvSpec::new(cs, cs, 3))?;
        let unsqueeze = Conv2d::new(&mut s, "unsqueeze", ConvSpec::new(cs, c, 1))?;
        let embed = TokenEmbed::new(&mut s, "embed", cs, cfg.embed, cfg.sub)?;
        let mha = Mha::new(&mut s, "mha", spec)?;
        let to_map = TokenToMap::new(&mut s, "to_map", cfg.embed, cs, grid, cfg.sub)?;
        let expand = Conv2d::new(&mut s, "expand", ConvSpec::new(cs, c, 1))?;
        let gates = match cfg.kind {
            RefineKind::AdaRm => {
                let hw = [cfg.height, cfg.width];
                Some((s.add("p1", &hw, Init::Zero)?, s.add("p2", &hw, Init::Zero)?))
            }
            RefineKind::Rm => None,
        };
        Ok(Refine {
            cfg,
            squeeze,
            local,
            unsqueeze,
            embed,
            mha,
            to_map,
            expand,
            gates,
        })
    }

    fn check_input<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let want = [self.cfg.channels, self.cfg.height, self.cfg.width];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(
                "refine",
                format!("[B, {}, {}, {}]", want[0], want[1], want[2]),
                s,
            ));
        }
        Ok(())
    }

    /// `(X1, X3)`: the squeezed map and the local branch output.
    pub fn local_branch<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        self.check_input(g, x)?;
        let x1 = self.squeeze.forward(g, x)?;
        let x2 = self.local.forward(g, x1)?;
        let x3 = self.unsqueeze.forward(g, x2)?;
        Ok((x1, x3))
    }

    /// `X5` from the squeezed map `X1`.
    pub fn global_branch<T: Float>(&self, g: &mut Graph<'_, T>, x1: Var) -> Result<Var> {
        let tokens = self.embed.forward(g, x1)?;
        let x2 = self.mha.forward(g, tokens)?;
        let x4 = self.to_map.forward(g, x2)?;
        self.expand.forward(g, x4)
    }
}

/// Multiplies `x [B, C, H, W]` by a `[H, W]` gate broadcast over batch and
/// channels.
pub fn gate<T: Float>(g: &mut Graph<'_, T>, p: ParamId, x: Var) -> Result<Var> {
    let pv = g.param(p)?;
    let hw = g.shape(pv).to_vec();
    let p4 = g.reshape(pv, &[1, 1, hw[0], hw[1]])?;
    g.mul(p4, x)
}

impl Module for Refine {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (x1, x3) = self.local_branch(g, x)?;
        let x5 = self.global_branch(g, x1)?;
        let (a, b) = match self.gates {
            Some((p1, p2)) => (gate(g, p1, x3)?, gate(g, p2, x5)?),
            None => (x3, x5),
        };
        let y = g.add(x, a)?;
        g.add(y, b)
    }
}
