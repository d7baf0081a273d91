//! Registries behind the `gradcheck` and `invariants` workflows.
//!
//! Every gradient case builds a small f64 computation, contracts its
//! output with a seeded random tensor `R` so the loss is `sum(y * R)`, and
//! compares reverse-mode gradients against central differences at sampled
//! input and parameter coordinates.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::disparity::{disp_to_depth, DispConfig, DispHead, DispKind, MAX_DEPTH_OUT, MIN_DEPTH_OUT};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_at, rel_error};
use crate::graph::{Graph, Var};
use crate::io::{decode_tensor, encode_tensor, AnyTensor};
use crate::metrics::{ada_search_scale, compute_metrics, scale_factor, zeta_grid, DEFAULT_CAP};
use crate::net::{EncBlock, FeaturePyramid, IeMode, Level, Net, NetConfig, Variants};
use crate::nn::{ConvSpec, ConvTranspose2d, Linear, Mha, MhaSpec, Module, TokenEmbed, TokenToMap, STD_EPS};
use crate::param::ParamStore;
use crate::refine::{Refine, RefineConfig, RefineKind};
use crate::resample::{Down, DownKind, Up, UpKind, UpRefine};
use crate::scene::{synth_scene, SceneSpec};
use crate::tensor::{self, Axis, ConvGeom, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Deliberate faults used as negative controls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fixture {
    /// Skews the analytic gradient of the named case.
    PerturbGradient(String),
    /// Corrupts the unfold step of the layout round-trip suite.
    BrokenFold,
}

impl FromStr for Fixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("perturb-grad", name)) if !name.is_empty() => Ok(Fixture::PerturbGradient(name.to_string())),
            None if s == "broken-fold" => Ok(Fixture::BrokenFold),
            _ => Err(Error::Config {
                path: "fixture".into(),
                message: format!("expected `perturb-grad:<case>` or `broken-fold`, got `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Primitive,
    Module,
}

type Forward = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

/// A computation under test: its parameters, inputs and forward map.
pub struct Setup {
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Forward,
}

pub struct GradCase {
    pub name: &'static str,
    /// Owning library area, e.g. `resample`.
    pub area: &'static str,
    pub group: Group,
    build: fn(u64) -> Result<Setup>,
}

impl GradCase {
    pub fn setup(&self, seed: u64) -> Result<Setup> {
        (self.build)(seed)
    }
}

#[derive(Debug, Clone)]
pub struct GradOptions {
    pub seeds: Vec<u64>,
    pub step: f64,
    /// Coordinates sampled per input tensor.
    pub input_samples: usize,
    /// Coordinates sampled per parameter tensor.
    pub param_samples: usize,
    /// Noise added to every parameter so zero gates do not hide branches.
    pub param_noise: f64,
    pub fixture: Option<Fixture>,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions {
            seeds: vec![0, 1, 2],
            step: FD_STEP,
            input_samples: 6,
            param_samples: 2,
            param_noise: 0.1,
            fixture: None,
        }
    }
}

impl GradOptions {
    /// The default options with seeds `base, base + 1, base + 2`.
    pub fn with_base_seed(base: u64) -> Self {
        GradOptions {
            seeds: (0..3).map(|i| base.wrapping_add(i)).collect(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub area: &'static str,
    pub worst: f64,
    pub coords: usize,
    pub seeds: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst <= GRAD_TOL
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:<12} worst {:.3e} over {} coords x {} seeds  {}",
            self.name,
            self.area,
            self.worst,
            self.coords,
            self.seeds,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn eval_loss(setup: &Setup, store: &ParamStore<f64>, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = (setup.f)(&mut g, &vars)?;
    Ok(dot(g.value(y).data(), r.data()))
}

fn pick(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

/// Worst relative error and number of coordinates for one seed.
fn check_seed(name: &str, mut setup: Setup, seed: u64, opts: &GradOptions) -> Result<(f64, usize)> {
    setup.store.perturb_all(seed ^ 0x5eed, opts.param_noise);
    let mut rng = rng(seed ^ 0xfeed);

    let mut g = Graph::with_params(&setup.store);
    let vars: Vec<Var> = setup.inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = (setup.f)(&mut g, &vars)?;
    let r = Tensor::<f64>::randn(g.shape(y), 1.0, &mut rng);
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;

    let skew = matches!(&opts.fixture, Some(Fixture::PerturbGradient(n)) if n == name);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut score = |analytic: f64, fd: f64| {
        let a = if skew {
            analytic + 1e-2 * analytic.abs().max(1.0)
        } else {
            analytic
        };
        let e = rel_error(a, fd);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        count += 1;
    };

    for (k, &v) in vars.iter().enumerate() {
        let x = &setup.inputs[k];
        let coords = pick(&mut rng, x.numel(), opts.input_samples);
        let fd = finite_diff_at(
            |probe| {
                let mut ins = setup.inputs.clone();
                ins[k] = probe.clone();
                eval_loss(&setup, &setup.store, &ins, &r)
            },
            x,
            opts.step,
            &coords,
        )?;
        let an = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for (&c, &d) in coords.iter().zip(&fd) {
            score(an.data()[c], d);
        }
    }

    let ids: Vec<_> = setup
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let value = setup.store.value(id).clone();
        let coords = pick(&mut rng, value.numel(), opts.param_samples);
        let mut probe_store = setup.store.clone();
        let fd = finite_diff_at(
            |probe| {
                probe_store.set_value(id, probe.clone())?;
                eval_loss(&setup, &probe_store, &setup.inputs, &r)
            },
            &value,
            opts.step,
            &coords,
        )?;
        let an = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        for (&c, &d) in coords.iter().zip(&fd) {
            score(an.data()[c], d);
        }
    }
    Ok((worst, count))
}

pub fn check_case(case: &GradCase, opts: &GradOptions) -> Result<GradReport> {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for &seed in &opts.seeds {
        let (w, c) = check_seed(case.name, case.setup(seed)?, seed, opts)?;
        worst = worst.max(w);
        coords += c;
    }
    Ok(GradReport {
        name: case.name,
        area: case.area,
        worst,
        coords,
        seeds: opts.seeds.len(),
    })
}

/// Cases whose name or area equals `filter`, or every case.
pub fn select_cases(filter: Option<&str>) -> Result<Vec<GradCase>> {
    let all = grad_cases();
    let Some(f) = filter else { return Ok(all) };
    let chosen: Vec<_> = all.into_iter().filter(|c| c.name == f || c.area == f).collect();
    if chosen.is_empty() {
        return Err(Error::Config {
            path: "variant".into(),
            message: format!("no gradient case or area named `{f}`"),
        });
    }
    Ok(chosen)
}

// ---- case builders -------------------------------------------------------

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect()
}

fn prim(seed: u64, shapes: &[&[usize]], f: Forward) -> Result<Setup> {
    Ok(Setup {
        store: ParamStore::new(seed),
        inputs: inputs(seed, shapes),
        f,
    })
}

fn module<M: Module + 'static>(
    seed: u64,
    shape: &[usize],
    build: impl FnOnce(&mut ParamStore<f64>) -> Result<M>,
) -> Result<Setup> {
    let mut store = ParamStore::new(seed);
    let m = build(&mut store)?;
    Ok(Setup {
        store,
        inputs: inputs(seed, &[shape]),
        f: Box::new(move |g, v| m.forward(g, v[0])),
    })
}

fn unary(seed: u64, f: fn(&mut Graph<'_, f64>, Var) -> Result<Var>) -> Result<Setup> {
    prim(seed, &[&[2, 3, 5]], Box::new(move |g, v| f(g, v[0])))
}

const UP_REFINE: UpRefine = UpRefine {
    squeeze: 2,
    sub: (2, 2),
    embed: 4,
    heads: 2,
};

fn refine_cfg(kind: RefineKind) -> RefineConfig {
    RefineConfig {
        channels: 4,
        height: 4,
        width: 6,
        squeeze: 2,
        sub: (2, 2),
        embed: 4,
        heads: 2,
        kind,
    }
}

fn down_case(seed: u64, kind: DownKind) -> Result<Setup> {
    module(seed, &[1, 4, 4, 8], |s| Down::new(&mut s.scope(""), "d", kind, 4, 4, 8))
}

fn up_case(seed: u64, kind: UpKind) -> Result<Setup> {
    module(seed, &[1, 3, 4, 4], |s| {
        Up::new(&mut s.scope(""), "u", kind, 3, 4, 4, UP_REFINE)
    })
}

fn disp_case(seed: u64, kind: DispKind) -> Result<Setup> {
    let cfg = DispConfig {
        channels: 3,
        height: 4,
        width: 8,
        sub: (2, 4),
        embed: 4,
        heads: 2,
        kind,
    };
    module(seed, &[1, 3, 4, 8], |s| DispHead::new(&mut s.scope(""), "d", &cfg))
}

/// Tiny network with encoder features fed in as inputs.
fn net_case(seed: u64, f: fn(&Net, &mut Graph<'_, f64>, FeaturePyramid) -> Result<Var>) -> Result<Setup> {
    let cfg = NetConfig::tiny();
    let mut store = ParamStore::new(seed);
    let net = Net::new(&mut store, cfg.clone())?;
    let shapes: Vec<Vec<usize>> = (0..5)
        .map(|i| {
            let (h, w) = (cfg.height >> (i + 1), cfg.width >> (i + 1));
            vec![1, cfg.enc_channels[i], h, w]
        })
        .collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let ins = inputs(seed, &refs);
    Ok(Setup {
        store,
        inputs: ins,
        f: Box::new(move |g, v| {
            let levels = v
                .iter()
                .enumerate()
                .map(|(i, &var)| Level {
                    index: i,
                    var,
                    stride: 2 << i,
                    channels: net.cfg.enc_channels[i],
                })
                .collect();
            f(&net, g, FeaturePyramid { levels })
        }),
    })
}

fn flat_concat(g: &mut Graph<'_, f64>, vs: &[Var]) -> Result<Var> {
    let flat = vs
        .iter()
        .map(|&v| {
            let n = g.value(v).numel();
            g.reshape(v, &[n])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&flat, 0)
}

macro_rules! case {
    ($name:literal, $area:literal, $group:ident, $build:expr) => {
        GradCase {
            name: $name,
            area: $area,
            group: Group::$group,
            build: $build,
        }
    };
}

/// Every primitive op and every module, each exactly once.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case!("add", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4], &[1, 3, 1]],
            Box::new(|g, v| g.add(v[0], v[1]))
        )),
        case!("sub", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4], &[1, 1, 4]],
            Box::new(|g, v| g.sub(v[0], v[1]))
        )),
        case!("mul", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4], &[1, 3, 4]],
            Box::new(|g, v| g.mul(v[0], v[1]))
        )),
        case!("affine", "tensor_core", Primitive, |s| prim(
            s,
            &[&[3, 4]],
            Box::new(|g, v| Ok(g.affine(v[0], 1.7, -0.3)))
        )),
        case!("elu", "tensor_core", Primitive, |s| unary(s, |g, x| g.elu(x))),
        case!("relu", "tensor_core", Primitive, |s| unary(s, |g, x| g.relu(x))),
        case!("gelu", "tensor_core", Primitive, |s| unary(s, |g, x| g.gelu(x))),
        case!("sigmoid", "tensor_core", Primitive, |s| unary(s, |g, x| g.sigmoid(x))),
        case!("exp", "tensor_core", Primitive, |s| unary(s, |g, x| g
            .unary(x, crate::graph::Unary::Exp))),
        case!("abs", "tensor_core", Primitive, |s| unary(s, |g, x| g.abs(x))),
        case!("ln", "tensor_core", Primitive, |s| {
            let mut st = prim(s, &[&[2, 3, 5]], Box::new(|g, v| g.ln(v[0])))?;
            st.inputs[0] = st.inputs[0].map(|v| v.abs() + 0.5);
            Ok(st)
        }),
        case!("matmul", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4], &[2, 4, 5]],
            Box::new(|g, v| g.matmul(v[0], v[1]))
        )),
        case!("matmul_shared", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4], &[4, 5]],
            Box::new(|g, v| g.matmul(v[0], v[1]))
        )),
        case!("conv2d", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 4, 6, 5], &[6, 2, 3, 3], &[6]],
            Box::new(|g, v| g.conv2d(
                v[0],
                v[1],
                Some(v[2]),
                ConvGeom::same(3, 3).with_stride(2, 2).with_groups(2)
            ))
        )),
        case!("conv1d", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 1, 7], &[1, 1, 3]],
            Box::new(|g, v| g.conv1d(v[0], v[1], None, 1))
        )),
        case!("conv_transpose2d", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 3, 2], &[3, 2, 2, 2], &[2]],
            Box::new(|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeom::UNIT.with_stride(2, 2)))
        )),
        case!("max_pool2d", "tensor_core", Primitive, |s| prim(
            s,
            &[&[1, 2, 6, 4]],
            Box::new(|g, v| g.max_pool2d(v[0], 2, 2))
        )),
        case!("sum", "tensor_core", Primitive, |s| prim(
            s,
            &[&[3, 4]],
            Box::new(|g, v| Ok(g.sum(v[0])))
        )),
        case!("mean_all", "tensor_core", Primitive, |s| prim(
            s,
            &[&[3, 4]],
            Box::new(|g, v| Ok(g.mean_all(v[0])))
        )),
        case!("mean_axes", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4, 5]],
            Box::new(|g, v| g.mean_axes(v[0], &[2, 3]))
        )),
        case!("softmax", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4]],
            Box::new(|g, v| g.softmax(v[0], 1))
        )),
        case!("reshape", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4]],
            Box::new(|g, v| g.reshape(v[0], &[4, 6]))
        )),
        case!("permute", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4]],
            Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))
        )),
        case!("transpose", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4]],
            Box::new(|g, v| g.transpose(v[0], 1, 2))
        )),
        case!("concat", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4], &[2, 1, 4]],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1))
        )),
        case!("slice", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 5, 3]],
            Box::new(|g, v| g.slice(v[0], 1, 1, 3))
        )),
        case!("split", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 5, 3]],
            Box::new(|g, v| {
                let p = g.split(v[0], 1, &[2, 3])?;
                let q = g.affine(p[0], 2.0, 0.0);
                g.concat(&[p[1], q], 1)
            })
        )),
        case!("bilinear_up2", "tensor_core", Primitive, |s| prim(
            s,
            &[&[1, 2, 3, 4]],
            Box::new(|g, v| g.bilinear_up2(v[0]))
        )),
        case!("pixel_shuffle", "tensor_core", Primitive, |s| prim(
            s,
            &[&[1, 8, 2, 3]],
            Box::new(|g, v| g.pixel_shuffle(v[0], 2))
        )),
        case!("pixel_unshuffle", "tensor_core", Primitive, |s| prim(
            s,
            &[&[1, 2, 4, 6]],
            Box::new(|g, v| g.pixel_unshuffle(v[0], 2))
        )),
        case!("axial_fold", "tensor_core", Primitive, |s| prim(
            s,
            &[&[1, 2, 4, 6]],
            Box::new(|g, v| {
                let h = g.axial_fold(v[0], Axis::Height, 2)?;
                g.axial_fold(h, Axis::Width, 2)
            })
        )),
        case!("axial_unfold", "tensor_core", Primitive, |s| prim(
            s,
            &[&[1, 8, 2, 3]],
            Box::new(|g, v| {
                let w = g.axial_unfold(v[0], Axis::Width, 2)?;
                g.axial_unfold(w, Axis::Height, 2)
            })
        )),
        case!("standardize", "tensor_core", Primitive, |s| prim(
            s,
            &[&[2, 3, 4]],
            Box::new(|g, v| Ok(g.standardize(v[0], STD_EPS)))
        )),
        case!("linear", "nn_ops", Module, |s| module(s, &[2, 3, 5], |st| Linear::new(
            &mut st.scope(""),
            "l",
            5,
            4
        ))),
        case!("conv2d_layer", "nn_ops", Module, |s| module(s, &[1, 3, 5, 4], |st| {
            crate::nn::Conv2d::new(&mut st.scope(""), "c", ConvSpec::new(3, 4, 3))
        })),
        case!("conv_transpose_layer", "nn_ops", Module, |s| module(
            s,
            &[1, 3, 2, 2],
            |st| ConvTranspose2d::new(&mut st.scope(""), "c", 3, 2, (2, 3))
        )),
        case!("mha", "nn_ops", Module, |s| module(s, &[2, 4, 6], |st| Mha::new(
            &mut st.scope(""),
            "m",
            MhaSpec::new(4, 6, 2)?
        ))),
        case!("token_embed", "nn_ops", Module, |s| module(s, &[1, 3, 4, 6], |st| {
            TokenEmbed::new(&mut st.scope(""), "e", 3, 4, (2, 3))
        })),
        case!("token_to_map", "nn_ops", Module, |s| module(s, &[1, 4, 4], |st| {
            TokenToMap::new(&mut st.scope(""), "t", 4, 3, (2, 2), (2, 3))
        })),
        case!("ada_rm", "adarm", Module, |s| module(s, &[1, 4, 4, 6], |st| {
            Refine::new(&mut st.scope(""), "r", refine_cfg(RefineKind::AdaRm))
        })),
        case!("rm", "adarm", Module, |s| module(s, &[1, 4, 4, 6], |st| Refine::new(
            &mut st.scope(""),
            "r",
            refine_cfg(RefineKind::Rm)
        ))),
        case!("down_maxpool", "resample", Module, |s| down_case(s, DownKind::MaxPool)),
        case!("down_stride", "resample", Module, |s| down_case(s, DownKind::Stride)),
        case!("down_maxpool_stride", "resample", Module, |s| down_case(
            s,
            DownKind::MaxPoolStride
        )),
        case!("down_cas", "resample", Module, |s| down_case(s, DownKind::Cas)),
        case!("down_ncas", "resample", Module, |s| down_case(s, DownKind::Ncas)),
        case!("down_ada_ncas", "resample", Module, |s| down_case(s, DownKind::AdaNcas)),
        case!("down_ada_npcas", "resample", Module, |s| down_case(
            s,
            DownKind::AdaNpcas
        )),
        case!("down_ada_axial_npcas", "resample", Module, |s| down_case(
            s,
            DownKind::AdaAxialNpcas
        )),
        case!("up_biu", "resample", Module, |s| up_case(s, UpKind::Biu)),
        case!("up_rcu", "resample", Module, |s| up_case(s, UpKind::Rcu)),
        case!("up_nrcu", "resample", Module, |s| up_case(s, UpKind::Nrcu)),
        case!("up_ada_nrsu", "resample", Module, |s| up_case(s, UpKind::AdaNrsu)),
        case!("up_dada_nrsu", "resample", Module, |s| up_case(s, UpKind::DAdaNrsu)),
        case!("att_disp", "disparity", Module, |s| disp_case(s, DispKind::AttDisp)),
        case!("conv2d_disp", "disparity", Module, |s| disp_case(
            s,
            DispKind::Conv2dDisp
        )),
        case!("encoder_block", "decoder_net", Module, |s| module(
            s,
            &[1, 3, 8, 6],
            |st| EncBlock::new(&mut st.scope(""), "b", 3, 4)
        )),
        case!("refine_skip", "decoder_net", Module, |s| net_case(s, |net, g, pyr| net
            .refine_skip(g, &pyr, 0, 2))),
        case!("decode", "decoder_net", Module, |s| net_case(s, |net, g, pyr| {
            let dec = net.decode(g, &pyr)?;
            flat_concat(g, &dec)
        })),
        case!("full_forward", "decoder_net", Module, |s| {
            let mut store = ParamStore::new(s);
            let net = Net::new(&mut store, NetConfig::tiny())?;
            Ok(Setup {
                store,
                inputs: inputs(s, &[&[1, 3, 32, 32]]),
                f: Box::new(move |g, v| {
                    let out = net.forward(g, v[0])?;
                    flat_concat(g, &out.disp)
                }),
            })
        }),
    ]
}

// ---- invariants ----------------------------------------------------------

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub struct InvariantCase {
    pub name: &'static str,
    pub area: &'static str,
    run: fn(u64, Option<&Fixture>) -> Check,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    pub name: &'static str,
    pub area: &'static str,
    pub outcome: Check,
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            Ok(()) => write!(f, "{:<28} {:<12} ok", self.name, self.area),
            Err(e) => write!(f, "{:<28} {:<12} FAIL: {e}", self.name, self.area),
        }
    }
}

fn run_module<M: Module>(store: &ParamStore<f64>, m: &M, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut g = Graph::with_params(store);
    let v = g.constant(x.clone());
    let y = m.forward(&mut g, v)?;
    Ok(g.value(y).clone())
}

/// Random 4D shape whose spatial extents are even.
fn even_shape(r: &mut ChaCha8Rng) -> [usize; 4] {
    [
        r.random_range(1..3),
        r.random_range(1..5),
        2 * r.random_range(1..5),
        2 * r.random_range(1..5),
    ]
}

fn layout_roundtrips(seed: u64, fixture: Option<&Fixture>) -> Check {
    let broken = fixture == Some(&Fixture::BrokenFold);
    let mut r = rng(seed);
    for i in 0..100 {
        let shape = even_shape(&mut r);
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut r);
        let sorted = x.sorted_values();
        let mut trips: Vec<(&str, Tensor<f64>, Tensor<f64>)> = Vec::new();
        for axis in [Axis::Height, Axis::Width] {
            let f = lift(tensor::axial_fold(&x, axis, 2))?;
            let mut u = lift(tensor::axial_unfold(&f, axis, 2))?;
            if broken {
                u = Tensor::from_parts(u.shape().to_vec(), u.data().iter().rev().copied().collect());
            }
            trips.push(("axial", f, u));
        }
        let f = lift(tensor::pixel_unshuffle(&x, 2))?;
        let u = lift(tensor::pixel_shuffle(&f, 2))?;
        trips.push(("space_to_depth", f, u));
        let y = Tensor::<f64>::randn(&[shape[0], 4 * shape[1], shape[2] / 2, shape[3] / 2], 1.0, &mut r);
        let s = lift(tensor::pixel_shuffle(&y, 2))?;
        let back = lift(tensor::pixel_unshuffle(&s, 2))?;
        ensure(back.bit_eq(&y) && s.sorted_values() == y.sorted_values(), || {
            format!("pixel_shuffle round trip failed at shape {:?}", y.shape())
        })?;
        for (what, folded, back) in trips {
            ensure(back.bit_eq(&x), || {
                format!("{what} round trip #{i} differs at shape {shape:?}")
            })?;
            ensure(folded.sorted_values() == sorted, || {
                format!("{what} fold #{i} changed the value multiset")
            })?;
        }
    }
    Ok(())
}

fn softmax_rows(seed: u64, _: Option<&Fixture>) -> Check {
    let mut r = rng(seed);
    let x = Tensor::<f64>::randn(&[3, 5, 7], 4.0, &mut r);
    for axis in 0..3 {
        let y = lift(tensor::softmax(&x, axis))?;
        let z = lift(tensor::softmax(&x.map(|v| v + 3.25), axis))?;
        let sums = lift(tensor::reduce_to_shape(&y, &{
            let mut s = x.shape().to_vec();
            s[axis] = 1;
            s
        }))?;
        ensure(sums.data().iter().all(|s| (s - 1.0).abs() <= 1e-6), || {
            format!("row sums off along axis {axis}")
        })?;
        ensure(y.max_abs_diff(&z) <= 1e-6, || {
            format!("not shift invariant along axis {axis}")
        })?;
    }
    Ok(())
}

fn mha_single_token(seed: u64, _: Option<&Fixture>) -> Check {
    let mut store = ParamStore::<f64>::new(seed);
    let m = lift(Mha::new(&mut store.scope(""), "m", lift(MhaSpec::new(1, 6, 3))?))?;
    store.perturb_all(seed + 1, 0.5);
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::randn(&[2, 1, 6], 1.0, &mut rng(seed)));
    let tr = lift(m.trace(&mut g, x))?;
    ensure(g.value(tr.weights).data().iter().all(|&w| w == 1.0), || {
        "T = 1 weights not exactly one".into()
    })?;
    let v = lift(g.permute(tr.values, &[0, 2, 1, 3]))?;
    let v = lift(g.reshape(v, &[2, 1, 6]))?;
    ensure(g.value(tr.heads).bit_eq(g.value(v)), || {
        "T = 1 attention output differs from values".into()
    })
}

fn adarm_identity(seed: u64, _: Option<&Fixture>) -> Check {
    let mut store = ParamStore::<f64>::new(seed);
    let m = lift(Refine::new(&mut store.scope(""), "r", refine_cfg(RefineKind::AdaRm)))?;
    let x = Tensor::randn(&[2, 4, 4, 6], 1.0, &mut rng(seed));
    ensure(lift(run_module(&store, &m, &x))?.bit_eq(&x), || {
        "fresh AdaRM is not the identity".into()
    })
}

fn ada_down_cores(seed: u64, _: Option<&Fixture>) -> Check {
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng(seed));
    for kind in [DownKind::AdaNcas, DownKind::AdaNpcas, DownKind::AdaAxialNpcas] {
        let mut store = ParamStore::<f64>::new(seed);
        let d = lift(Down::new(&mut store.scope(""), "d", kind, 4, 8, 8))?;
        let full = lift(run_module(&store, &d, &x))?;
        let core = lift(run_module(&store, &d.without_adaptive(), &x))?;
        ensure(full.bit_eq(&core), || {
            format!("fresh {} differs from its core", kind.name())
        })?;
    }
    Ok(())
}

fn resample_extents(seed: u64, _: Option<&Fixture>) -> Check {
    let x = Tensor::randn(&[1, 4, 4, 8], 1.0, &mut rng(seed));
    for kind in DownKind::ALL {
        let mut store = ParamStore::<f64>::new(seed);
        let d = lift(Down::new(&mut store.scope(""), "d", kind, 4, 4, 8))?;
        let y = lift(run_module(&store, &d, &x))?;
        ensure(y.shape() == [1, 4, 2, 4], || {
            format!("{} gave {:?}", kind.name(), y.shape())
        })?;
    }
    for kind in UpKind::ALL {
        let mut store = ParamStore::<f64>::new(seed);
        let u = lift(Up::new(&mut store.scope(""), "u", kind, 4, 4, 8, UP_REFINE))?;
        let y = lift(run_module(&store, &u, &x))?;
        ensure(y.shape() == [1, 4, 8, 16], || {
            format!("{} gave {:?}", kind.name(), y.shape())
        })?;
    }
    Ok(())
}

fn dada_nrsu_bilinear(seed: u64, _: Option<&Fixture>) -> Check {
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng(seed));
    let mut store = ParamStore::<f64>::new(seed);
    let u = lift(Up::new(&mut store.scope(""), "u", UpKind::DAdaNrsu, 3, 4, 4, UP_REFINE))?;
    let want = tensor::standardize(&lift(tensor::bilinear_up2(&x))?, STD_EPS);
    ensure(lift(run_module(&store, &u, &x))?.bit_eq(&want), || {
        "fresh DAdaNRSU differs from standardized bilinear upsampling".into()
    })
}

fn adaie_equals_noie(seed: u64, _: Option<&Fixture>) -> Check {
    let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng(seed));
    let mut outs = Vec::new();
    for ie in [IeMode::AdaIe, IeMode::NoIe] {
        let cfg = NetConfig::tiny().with_variants(Variants {
            ie,
            ..Variants::default()
        });
        let mut store = ParamStore::<f64>::new(seed);
        let net = lift(Net::new(&mut store, cfg))?;
        let mut g = Graph::with_params(&store);
        let v = g.constant(x.clone());
        let pyr = lift(net.encode(&mut g, v))?;
        let dec = lift(net.decode(&mut g, &pyr))?;
        outs.push(dec.iter().map(|&d| g.value(d).clone()).collect::<Vec<_>>());
    }
    ensure(outs[0].iter().zip(&outs[1]).all(|(a, b)| a.bit_eq(b)), || {
        "AdaIE decode differs from NoIE".into()
    })
}

fn encoder_strides(seed: u64, _: Option<&Fixture>) -> Check {
    let mut store = ParamStore::<f64>::new(seed);
    let net = lift(Net::new(&mut store, NetConfig::tiny()))?;
    let mut g = Graph::with_params(&store);
    let v = g.constant(Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng(seed)));
    let pyr = lift(net.encode(&mut g, v))?;
    for (i, l) in pyr.levels.iter().enumerate() {
        ensure(l.stride == 2 << i && g.shape(l.var)[2] == 32 / l.stride, || {
            format!("level {i} stride wrong")
        })?;
    }
    Ok(())
}

fn depth_range(seed: u64, _: Option<&Fixture>) -> Check {
    let mut r = rng(seed);
    let mut d: Vec<f64> = (0..200).map(|_| r.random_range(0.0..=1.0)).collect();
    d.extend([0.0, 1.0]);
    d.sort_by(f64::total_cmp);
    let depth = lift(disp_to_depth(&Tensor::from_vec(d)))?;
    let z = depth.data();
    ensure(z.iter().all(|v| (MIN_DEPTH_OUT..=MAX_DEPTH_OUT).contains(v)), || {
        "depth outside range".into()
    })?;
    ensure(z.windows(2).all(|w| w[1] <= w[0]), || {
        "depth not monotone decreasing".into()
    })?;
    ensure(
        (z[0] - 100.0).abs() <= 1e-12 && (z[z.len() - 1] - 1.0 / 10.01).abs() <= 1e-12,
        || "endpoints off".into(),
    )
}

fn random_pair(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let gt: Vec<f64> = (0..n).map(|_| r.random_range(0.5..90.0)).collect();
    let k = r.random_range(0.05..20.0);
    let pred = gt.iter().map(|g| g * k * r.random_range(0.6..1.6)).collect();
    let mask = (0..n).map(|_| r.random_bool(0.9)).collect();
    (pred, gt, mask)
}

fn metric_bounds(seed: u64, _: Option<&Fixture>) -> Check {
    let mut r = rng(seed);
    for _ in 0..50 {
        let (p, g, m) = random_pair(&mut r, 64);
        let Ok(x) = compute_metrics(&p, &g, &m, DEFAULT_CAP) else {
            continue;
        };
        ensure(
            x.abs_rel >= 0.0 && x.sq_rel >= 0.0 && x.rmse >= 0.0 && x.rmse_log >= 0.0,
            || "negative error metric".into(),
        )?;
        ensure(
            0.0 <= x.delta1 && x.delta1 <= x.delta2 && x.delta2 <= x.delta3 && x.delta3 <= 1.0,
            || "threshold accuracies out of order".into(),
        )?;
    }
    Ok(())
}

fn scale_dominance(seed: u64, _: Option<&Fixture>) -> Check {
    let mut r = rng(seed);
    for i in 0..200 {
        let (p, g, m) = random_pair(&mut r, 48);
        if !m.iter().any(|&b| b) {
            continue;
        }
        let ada = lift(ada_search_scale(&p, &g, &m, DEFAULT_CAP))?.abs_rel;
        for zeta in [1.0, 0.0] {
            let s = lift(scale_factor(&p, &g, &m, zeta))?;
            let scaled: Vec<f64> = p.iter().map(|v| v * s).collect();
            let other = lift(compute_metrics(&scaled, &g, &m, DEFAULT_CAP))?.abs_rel;
            ensure(ada <= other, || {
                format!("pair {i}: search {ada} above zeta {zeta} result {other}")
            })?;
        }
    }
    Ok(())
}

fn proportional_scale(seed: u64, _: Option<&Fixture>) -> Check {
    let mut r = rng(seed);
    for _ in 0..50 {
        let gt: Vec<f64> = (0..40).map(|_| r.random_range(1.0..70.0)).collect();
        let k = 2f64.powi(r.random_range(-4..5));
        let pred: Vec<f64> = gt.iter().map(|g| g * k).collect();
        let mask = vec![true; gt.len()];
        for zeta in zeta_grid() {
            let s = lift(scale_factor(&pred, &gt, &mask, zeta))?;
            ensure(s == 1.0 / k, || format!("zeta {zeta}: scale {s} for factor {k}"))?;
        }
    }
    Ok(())
}

fn rescale_invariance(seed: u64, _: Option<&Fixture>) -> Check {
    let mut r = rng(seed);
    for _ in 0..50 {
        let (p, g, m) = random_pair(&mut r, 32);
        if !m.iter().any(|&b| b) {
            continue;
        }
        let c = 2f64.powi(r.random_range(-3..4));
        let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
        let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
        for zeta in [0.0, 0.5, 1.0] {
            let a = lift(scale_factor(&p, &g, &m, zeta))?;
            let b = lift(scale_factor(&ps, &gs, &m, zeta))?;
            ensure((a - b).abs() <= 1e-12 * a.abs(), || format!("zeta {zeta}: {a} vs {b}"))?;
        }
    }
    Ok(())
}

fn tensor_roundtrip(seed: u64, _: Option<&Fixture>) -> Check {
    let mut r = rng(seed);
    for _ in 0..20 {
        let rank = r.random_range(1..5);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..5)).collect();
        let a = Tensor::<f32>::randn(&shape, 1.0, &mut r);
        let b = Tensor::<f64>::randn(&shape, 1.0, &mut r);
        let (da, _) = lift(decode_tensor(&lift(encode_tensor(&a))?))?;
        let (db, _) = lift(decode_tensor(&lift(encode_tensor(&b))?))?;
        ensure(matches!(&da, AnyTensor::F32(t) if t.bit_eq(&a)), || {
            "f32 round trip".into()
        })?;
        ensure(matches!(&db, AnyTensor::F64(t) if t.bit_eq(&b)), || {
            "f64 round trip".into()
        })?;
    }
    Ok(())
}

fn scene_determinism(seed: u64, _: Option<&Fixture>) -> Check {
    let spec = SceneSpec {
        seed,
        height: 16,
        width: 24,
        ..SceneSpec::default()
    };
    let (a, b) = lift(synth_scene::<f64>(&spec))?;
    let (c, d) = lift(synth_scene::<f64>(&spec))?;
    ensure(a.bit_eq(&c) && b.bit_eq(&d), || "scene not deterministic".into())?;
    ensure(b.data().iter().all(|v| (spec.near..=spec.far).contains(v)), || {
        "depth outside [near, far]".into()
    })
}

macro_rules! inv {
    ($name:literal, $area:literal, $run:expr) => {
        InvariantCase {
            name: $name,
            area: $area,
            run: $run,
        }
    };
}

pub fn invariant_cases() -> Vec<InvariantCase> {
    vec![
        inv!("layout_round_trips", "tensor_core", layout_roundtrips),
        inv!("softmax_rows", "tensor_core", softmax_rows),
        inv!("mha_single_token", "nn_ops", mha_single_token),
        inv!("adarm_identity_at_init", "adarm", adarm_identity),
        inv!("ada_down_equals_core", "resample", ada_down_cores),
        inv!("resample_extents", "resample", resample_extents),
        inv!("dada_nrsu_bilinear", "resample", dada_nrsu_bilinear),
        inv!("adaie_equals_noie", "decoder_net", adaie_equals_noie),
        inv!("encoder_strides", "decoder_net", encoder_strides),
        inv!("depth_range", "disparity", depth_range),
        inv!("metric_bounds", "depth_eval", metric_bounds),
        inv!("scale_dominance", "depth_eval", scale_dominance),
        inv!("proportional_scale", "depth_eval", proportional_scale),
        inv!("rescale_invariance", "depth_eval", rescale_invariance),
        inv!("tensor_round_trip", "harness_io", tensor_roundtrip),
        inv!("scene_determinism", "harness_io", scene_determinism),
    ]
}

pub fn run_invariants(seed: u64, fixture: Option<&Fixture>) -> Vec<InvariantReport> {
    invariant_cases()
        .into_iter()
        .map(|c| InvariantReport {
            name: c.name,
            area: c.area,
            outcome: (c.run)(seed, fixture),
        })
        .collect()
}
