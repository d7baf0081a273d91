//! Learned 2x downsamplers and upsamplers.
//!
//! Downsamplers fold space into channels (axially or as a 2x2 block),
//! reweight the folded channels with a channel head and squeeze back to
//! the input width, optionally fusing a normalised max-pooled map.
//! Upsamplers fuse a bilinear estimate with a refined pixel-shuffle
//! reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv1d, Conv2d, ConvElu, ConvSpec, Module, STD_EPS};
use crate::param::{Init, ParamId, Scope};
use crate::refine::{Refine, RefineConfig, RefineKind};
use crate::scalar::Float;
use crate::tensor::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DownKind {
    MaxPool,
    Stride,
    MaxPoolStride,
    Cas,
    Ncas,
    AdaNcas,
    AdaNpcas,
    AdaAxialNpcas,
}

impl DownKind {
    pub const ALL: [DownKind; 8] = [
        DownKind::MaxPool,
        DownKind::Stride,
        DownKind::MaxPoolStride,
        DownKind::Cas,
        DownKind::Ncas,
        DownKind::AdaNcas,
        DownKind::AdaNpcas,
        DownKind::AdaAxialNpcas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DownKind::MaxPool => "maxpool",
            DownKind::Stride => "stride",
            DownKind::MaxPoolStride => "maxpool_stride",
            DownKind::Cas => "cas",
            DownKind::Ncas => "ncas",
            DownKind::AdaNcas => "ada_ncas",
            DownKind::AdaNpcas => "ada_npcas",
            DownKind::AdaAxialNpcas => "ada_axial_npcas",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fold {
    Axial(Axis),
    Block,
}

/// One fold-reweight-squeeze pass.
#[derive(Debug, Clone)]
pub struct AttentionPass {
    fold: Fold,
    pub pos_emb: Option<ParamId>,
    pub recombine: Conv2d,
    pub head_weight: Option<ParamId>,
    pub attention: Conv1d,
    pub squeeze: ConvElu,
}

impl AttentionPass {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float>(
        s: &mut Scope<'_, T>,
        name: &str,
        fold: Fold,
        c: usize,
        folded_hw: (usize, usize),
        pos: bool,
        weighted: bool,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        let (cf, groups) = match fold {
            Fold::Axial(_) => (2 * c, c),
            Fold::Block => (4 * c, 1),
        };
        let folded = [cf, folded_hw.0, folded_hw.1];
        let pos_emb = if pos {
            Some(s.add("pos_emb", &folded, Init::Zero)?)
        } else {
            None
        };
        let head_weight = if weighted {
            Some(s.add("head_weight", &folded, Init::One)?)
        } else {
            None
        };
        Ok(AttentionPass {
            fold,
            pos_emb,
            recombine: Conv2d::new(&mut s, "recombine", ConvSpec::new(cf, cf, 3).groups(groups))?,
            head_weight,
            attention: Conv1d::new(&mut s, "attention", 1, 1, 3)?,
            squeeze: ConvElu::new(&mut s, "squeeze", ConvSpec::new(cf, c, 3))?,
        })
    }

    fn fold<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self.fold {
            Fold::Axial(axis) => g.axial_fold(x, axis, 2),
            Fold::Block => g.pixel_unshuffle(x, 2),
        }
    }
}

/// Adds or multiplies a per-sample `[C, H, W]` parameter to a batch.
fn with_full<T: Float>(g: &mut Graph<'_, T>, p: ParamId, x: Var, mul: bool) -> Result<Var> {
    let pv = g.param(p)?;
    let mut shape = vec![1];
    shape.extend_from_slice(g.shape(pv));
    let p4 = g.reshape(pv, &shape)?;
    if mul {
        g.mul(p4, x)
    } else {
        g.add(x, p4)
    }
}

/// Multiplies `x` by a gate of the same per-sample shape.
pub fn full_gate<T: Float>(g: &mut Graph<'_, T>, p: ParamId, x: Var) -> Result<Var> {
    with_full(g, p, x, true)
}

impl Module for AttentionPass {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut xf = self.fold(g, x)?;
        if let Some(p) = self.pos_emb {
            xf = with_full(g, p, xf, false)?;
        }
        let xr = self.recombine.forward(g, xf)?;
        let weighted = match self.head_weight {
            Some(p) => full_gate(g, p, xr)?,
            None => xr,
        };
        let head = g.mean_axes(weighted, &[2, 3])?;
        let (b, cf) = (g.shape(head)[0], g.shape(head)[1]);
        let seq = g.reshape(head, &[b, 1, cf])?;
        let logits = self.attention.forward(g, seq)?;
        let a = g.sigmoid(logits)?;
        let a = g.reshape(a, &[b, cf, 1, 1])?;
        let xa = g.mul(xr, a)?;
        self.squeeze.forward(g, xa)
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    None,
    /// `main + P * standardize(maxpool(x))`.
    Gated(ParamId),
    /// `conv1x1(concat(standardize(main), standardize(maxpool(x))))`.
    Concat(Conv2d),
}

#[derive(Debug, Clone)]
enum DownBody {
    MaxPool,
    Stride(ConvElu),
    MaxPoolStride { conv: ConvElu, align: Conv2d },
    Attention(Vec<AttentionPass>),
}

/// A single 2x downsampling module of any [`DownKind`].
#[derive(Debug, Clone)]
pub struct Down {
    pub kind: DownKind,
    pub channels: usize,
    body: DownBody,
    pub fusion: Fusion,
}

impl Down {
    /// Builds a downsampler for `[B, channels, h, w]` inputs.
    pub fn new<T: Float>(
        s: &mut Scope<'_, T>,
        name: &str,
        kind: DownKind,
        channels: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("down", "even spatial extents", &[channels, h, w]));
        }
        let mut s = s.sub(name);
        let c = channels;
        let (h2, w2) = (h / 2, w / 2);
        let block = |s: &mut Scope<'_, T>, pos, weighted| -> Result<DownBody> {
            Ok(DownBody::Attention(vec![AttentionPass::new(
                s,
                "pass",
                Fold::Block,
                c,
                (h2, w2),
                pos,
                weighted,
            )?]))
        };
        let gated = |s: &mut Scope<'_, T>| -> Result<Fusion> {
            Ok(Fusion::Gated(s.add("fuse_gate", &[c, h2, w2], Init::Zero)?))
        };
        let (body, fusion) = match kind {
            DownKind::MaxPool => (DownBody::MaxPool, Fusion::None),
            DownKind::Stride => (
                DownBody::Stride(ConvElu::new(&mut s, "conv", ConvSpec::new(c, c, 3).stride(2))?),
                Fusion::None,
            ),
            DownKind::MaxPoolStride => (
                DownBody::MaxPoolStride {
                    conv: ConvElu::new(&mut s, "conv", ConvSpec::new(c, c, 3).stride(2))?,
                    align: Conv2d::new(&mut s, "align", ConvSpec::new(c, c, 1))?,
                },
                Fusion::None,
            ),
            DownKind::Cas => (block(&mut s, false, false)?, Fusion::None),
            DownKind::Ncas => {
                let body = block(&mut s, false, false)?;
                (
                    body,
                    Fusion::Concat(Conv2d::new(&mut s, "fuse", ConvSpec::new(2 * c, c, 1))?),
                )
            }
            DownKind::AdaNcas => {
                let body = block(&mut s, false, false)?;
                (body, gated(&mut s)?)
            }
            DownKind::AdaNpcas => {
                let body = block(&mut s, true, true)?;
                (body, gated(&mut s)?)
            }
            DownKind::AdaAxialNpcas => {
                let hp = AttentionPass::new(&mut s, "height", Fold::Axial(Axis::Height), c, (h2, w), true, true)?;
                let wp = AttentionPass::new(&mut s, "width", Fold::Axial(Axis::Width), c, (h2, w2), true, true)?;
                (DownBody::Attention(vec![hp, wp]), gated(&mut s)?)
            }
        };
        Ok(Down {
            kind,
            channels,
            body,
            fusion,
        })
    }

    /// The same module with position embeddings, head weights and the
    /// max-pool fusion removed, sharing every remaining parameter.
    pub fn without_adaptive(&self) -> Down {
        let body = match &self.body {
            DownBody::Attention(passes) => DownBody::Attention(
                passes
                    .iter()
                    .map(|p| AttentionPass {
                        pos_emb: None,
                        head_weight: None,
                        ..p.clone()
                    })
                    .collect(),
            ),
            other => other.clone(),
        };
        let fusion = match &self.fusion {
            Fusion::Gated(_) => Fusion::None,
            f => f.clone(),
        };
        Down {
            body,
            fusion,
            ..self.clone()
        }
    }

    pub fn passes(&self) -> &[AttentionPass] {
        match &self.body {
            DownBody::Attention(p) => p,
            _ => &[],
        }
    }
}

impl Module for Down {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(
                "down",
                format!("[B, {}, H, W] with even H, W", self.channels),
                &s,
            ));
        }
        let main = match &self.body {
            DownBody::MaxPool => return g.max_pool2d(x, 2, 2),
            DownBody::Stride(conv) => return conv.forward(g, x),
            DownBody::MaxPoolStride { conv, align } => {
                let a = conv.forward(g, x)?;
                let mp = g.max_pool2d(x, 2, 2)?;
                let b = align.forward(g, mp)?;
                return g.add(a, b);
            }
            DownBody::Attention(passes) => {
                let mut y = x;
                for p in passes {
                    y = p.forward(g, y)?;
                }
                y
            }
        };
        match &self.fusion {
            Fusion::None => Ok(main),
            Fusion::Gated(p) => {
                let mp = g.max_pool2d(x, 2, 2)?;
                let mp = g.standardize(mp, STD_EPS);
                let gated = full_gate(g, *p, mp)?;
                g.add(main, gated)
            }
            Fusion::Concat(conv) => {
                let mp = g.max_pool2d(x, 2, 2)?;
                let mp = g.standardize(mp, STD_EPS);
                let m = g.standardize(main, STD_EPS);
                let cat = g.concat(&[m, mp], 1)?;
                conv.forward(g, cat)
            }
        }
    }
}

/// `j` chained downsamplers with independent parameters.
#[derive(Debug, Clone)]
pub struct DownTimes(pub Vec<Down>);

impl DownTimes {
    pub fn new<T: Float>(
        s: &mut Scope<'_, T>,
        name: &str,
        kind: DownKind,
        channels: usize,
        h: usize,
        w: usize,
        j: usize,
    ) -> Result<Self> {
        if h % (1 << j) != 0 || w % (1 << j) != 0 {
            return Err(Error::shape(
                "down_times",
                format!("extents divisible by {}", 1 << j),
                &[h, w],
            ));
        }
        let mut s = s.sub(name);
        let stages = (0..j)
            .map(|k| Down::new(&mut s, &k.to_string(), kind, channels, h >> k, w >> k))
            .collect::<Result<_>>()?;
        Ok(DownTimes(stages))
    }
}

impl Module for DownTimes {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.0.iter().try_fold(x, |y, d| d.forward(g, y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpKind {
    Biu,
    Rcu,
    Nrcu,
    AdaNrsu,
    DAdaNrsu,
}

impl UpKind {
    pub const ALL: [UpKind; 5] = [
        UpKind::Biu,
        UpKind::Rcu,
        UpKind::Nrcu,
        UpKind::AdaNrsu,
        UpKind::DAdaNrsu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpKind::Biu => "biu",
            UpKind::Rcu => "rcu",
            UpKind::Nrcu => "nrcu",
            UpKind::AdaNrsu => "ada_nrsu",
            UpKind::DAdaNrsu => "dada_nrsu",
        }
    }
}

/// Settings of the refinement applied to the expanded `4C` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpRefine {
    pub squeeze: usize,
    pub sub: (usize, usize),
    pub embed: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
struct UpLearned {
    expand: Conv2d,
    refine: Refine,
}

/// A single 2x upsampling module of any [`UpKind`].
#[derive(Debug, Clone)]
pub struct Up {
    pub kind: UpKind,
    pub channels: usize,
    learned: Option<UpLearned>,
    pub fusion: Fusion,
}

impl Up {
    /// Builds an upsampler for `[B, channels, h, w]` inputs.
    pub fn new<T: Float>(
        s: &mut Scope<'_, T>,
        name: &str,
        kind: UpKind,
        channels: usize,
        h: usize,
        w: usize,
        rc: UpRefine,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        let c = channels;
        if kind == UpKind::Biu {
            return Ok(Up {
                kind,
                channels,
                learned: None,
                fusion: Fusion::None,
            });
        }
        let refine_kind = if kind == UpKind::DAdaNrsu {
            RefineKind::AdaRm
        } else {
            RefineKind::Rm
        };
        let rcfg = RefineConfig {
            channels: 4 * c,
            height: h,
            width: w,
            squeeze: rc.squeeze,
            sub: rc.sub,
            embed: rc.embed,
            heads: rc.heads,
            kind: refine_kind,
        };
        let learned = UpLearned {
            expand: Conv2d::new(&mut s, "expand", ConvSpec::new(c, 4 * c, 1))?,
            refine: Refine::new(&mut s, "refine", rcfg)?,
        };
        let fusion = match kind {
            UpKind::Rcu | UpKind::Nrcu => Fusion::Concat(Conv2d::new(&mut s, "fuse", ConvSpec::new(2 * c, c, 1))?),
            _ => Fusion::Gated(s.add("fuse_gate", &[c, 2 * h, 2 * w], Init::Zero)?),
        };
        Ok(Up {
            kind,
            channels,
            learned: Some(learned),
            fusion,
        })
    }

    pub fn refine(&self) -> Option<&Refine> {
        self.learned.as_ref().map(|l| &l.refine)
    }

    /// `(X_high1, X_high2)`: the bilinear estimate and, for learned
    /// kinds, the refined pixel-shuffle reconstruction.
    pub fn branches<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Option<Var>)> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape("up", format!("[B, {}, H, W]", self.channels), s));
        }
        let high1 = g.bilinear_up2(x)?;
        let Some(l) = &self.learned else {
            return Ok((high1, None));
        };
        let low1 = l.expand.forward(g, x)?;
        let low2 = l.refine.forward(g, low1)?;
        Ok((high1, Some(g.pixel_shuffle(low2, 2)?)))
    }
}

impl Module for Up {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (high1, high2) = self.branches(g, x)?;
        let Some(high2) = high2 else {
            return Ok(high1);
        };
        match (&self.fusion, self.kind) {
            (Fusion::Concat(conv), UpKind::Rcu) => {
                let cat = g.concat(&[high1, high2], 1)?;
                conv.forward(g, cat)
            }
            (Fusion::Concat(conv), _) => {
                let a = g.standardize(high1, STD_EPS);
                let b = g.standardize(high2, STD_EPS);
                let cat = g.concat(&[a, b], 1)?;
                conv.forward(g, cat)
            }
            (Fusion::Gated(p), _) => {
                let a = g.standardize(high1, STD_EPS);
                let b = g.standardize(high2, STD_EPS);
                let gated = full_gate(g, *p, b)?;
                g.add(a, gated)
            }
            (Fusion::None, _) => Ok(high1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;
    use crate::tensor::{self, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(seed: u64, shape: &[usize]) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn run(store: &ParamStore<f64>, m: &impl Module, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::with_params(store);
        let xv = g.constant(x.clone());
        let y = m.forward(&mut g, xv).unwrap();
        g.value(y).clone()
    }

    const UPR: UpRefine = UpRefine {
        squeeze: 2,
        sub: (2, 2),
        embed: 4,
        heads: 2,
    };

    #[test]
    fn every_down_kind_halves() {
        let x = input(1, &[2, 8, 16, 24]);
        for kind in DownKind::ALL {
            let mut store = ParamStore::<f64>::new(0);
            let d = Down::new(&mut store.scope(""), "d", kind, 8, 16, 24).unwrap();
            assert_eq!(run(&store, &d, &x).shape(), &[2, 8, 8, 12], "{kind:?}");
        }
    }

    #[test]
    fn maxpool_example() {
        let store = ParamStore::<f64>::new(0);
        let mut s = store.clone();
        let d = Down::new(&mut s.scope(""), "d", DownKind::MaxPool, 1, 2, 2).unwrap();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(run(&store, &d, &x).data(), &[4.0]);
    }

    #[test]
    fn odd_extent_rejected() {
        let mut store = ParamStore::<f64>::new(0);
        assert!(Down::new(&mut store.scope(""), "d", DownKind::Cas, 4, 5, 4).is_err());
    }

    #[test]
    fn ada_kinds_equal_their_cores_at_init() {
        let x = input(2, &[1, 4, 8, 8]);
        for kind in [DownKind::AdaNcas, DownKind::AdaNpcas, DownKind::AdaAxialNpcas] {
            let mut store = ParamStore::<f64>::new(5);
            let d = Down::new(&mut store.scope(""), "d", kind, 4, 8, 8).unwrap();
            let full = run(&store, &d, &x);
            let core = run(&store, &d.without_adaptive(), &x);
            assert!(full.bit_eq(&core), "{kind:?}");
        }
    }

    #[test]
    fn ada_ncas_core_is_cas() {
        // same seed and the same parameter creation order for the shared core
        let x = input(3, &[1, 4, 8, 8]);
        let mut s1 = ParamStore::<f64>::new(5);
        let ada = Down::new(&mut s1.scope(""), "d", DownKind::AdaNcas, 4, 8, 8).unwrap();
        let mut s2 = ParamStore::<f64>::new(5);
        let cas = Down::new(&mut s2.scope(""), "d", DownKind::Cas, 4, 8, 8).unwrap();
        assert!(run(&s1, &ada, &x).bit_eq(&run(&s2, &cas, &x)));
    }

    #[test]
    fn axial_folds_enumerate_block() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = tensor::axial_fold(&x, Axis::Height, 2).unwrap();
        let hw = tensor::axial_fold(&h, Axis::Width, 2).unwrap();
        assert_eq!(hw.shape(), &[1, 4, 1, 1]);
        assert_eq!(hw.sorted_values(), vec![1.0, 2.0, 3.0, 4.0]);
        for (c, want) in [(0, 1.0), (1, 2.0), (2, 3.0), (3, 4.0)] {
            assert_eq!(hw.get(&[0, c, 0, 0]), want);
        }
    }

    #[test]
    fn down_times_shapes_and_composition() {
        let x = input(4, &[1, 4, 16, 16]);
        let mut store = ParamStore::<f64>::new(5);
        let dt = DownTimes::new(&mut store.scope(""), "dt", DownKind::AdaAxialNpcas, 4, 16, 16, 2).unwrap();
        store.perturb_all(6, 0.2);
        let y = run(&store, &dt, &x);
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
        let step = run(&store, &dt.0[1], &run(&store, &dt.0[0], &x));
        assert!(y.bit_eq(&step));

        let mut s0 = ParamStore::<f64>::new(5);
        let id = DownTimes::new(&mut s0.scope(""), "dt", DownKind::Cas, 4, 16, 16, 0).unwrap();
        assert!(run(&s0, &id, &x).bit_eq(&x));
    }

    #[test]
    fn fresh_dada_nrsu_is_standardized_bilinear() {
        let x = input(7, &[2, 3, 4, 6]);
        let mut store = ParamStore::<f64>::new(5);
        let u = Up::new(&mut store.scope(""), "u", UpKind::DAdaNrsu, 3, 4, 6, UPR).unwrap();
        let y = run(&store, &u, &x);
        let want = tensor::standardize(&tensor::bilinear_up2(&x).unwrap(), STD_EPS);
        assert!(y.bit_eq(&want));
    }

    #[test]
    fn every_up_kind_doubles() {
        let x = input(8, &[1, 3, 4, 6]);
        for kind in UpKind::ALL {
            let mut store = ParamStore::<f64>::new(5);
            let u = Up::new(&mut store.scope(""), "u", kind, 3, 4, 6, UPR).unwrap();
            store.perturb_all(1, 0.1);
            assert_eq!(run(&store, &u, &x).shape(), &[1, 3, 8, 12], "{kind:?}");
        }
    }

    #[test]
    fn biu_constant_map() {
        let store = ParamStore::<f64>::new(0);
        let mut s = store.clone();
        let u = Up::new(&mut s.scope(""), "u", UpKind::Biu, 2, 3, 3, UPR).unwrap();
        let y = run(&store, &u, &Tensor::full(&[1, 2, 3, 3], 1.5));
        assert!(y.data().iter().all(|&v| v == 1.5));
    }
}
