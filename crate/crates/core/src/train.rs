//! Supervised overfit harness: AdamW on log-depth L1 over a fixed set of
//! synthetic frames, with per-strategy evaluation and CSV reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::disparity::{disp_to_depth, log_depth, DispKind};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::{load_config, save_checkpoint};
use crate::metrics::{evaluate, Align, DepthMetrics, DEFAULT_CAP};
use crate::net::{IeMode, Net, NetConfig, Variants};
use crate::param::{ParamId, ParamStore};
use crate::refine::RefineKind;
use crate::resample::{DownKind, UpKind};
use crate::scalar::Float;
use crate::scene::{synth_batch, SceneSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments of every trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    step: u32,
    moments: Vec<(ParamId, Vec<T>, Vec<T>)>,
}

impl<T: Float> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, vec![T::zero(); p.value.numel()], vec![T::zero(); p.value.numel()]))
            .collect();
        AdamState { step: 0, moments }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn update(&mut self, opt: &AdamW, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let c1 = 1.0 - opt.beta1.powi(self.step as i32);
        let c2 = 1.0 - opt.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
        let (lr, eps, wd) = (T::of(opt.lr), T::of(opt.eps), T::of(opt.weight_decay));
        let (c1, c2) = (T::of(c1), T::of(c2));
        for ((id, m, v), (gid, g)) in self.moments.iter_mut().zip(grads) {
            debug_assert_eq!(id, gid);
            let p = store.get_mut(*id).value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = p[i] - lr * (step + wd * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Seeds parameter initialisation.
    pub seed: u64,
    pub steps: usize,
    pub optimizer: AdamW,
    pub frames: usize,
    /// Frame `i` is rendered from `scene.seed + i`.
    pub scene: SceneSpec,
    pub log_every: usize,
    pub cap: f64,
    pub align: Vec<Align>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::desk(64, 96),
            seed: 0,
            steps: 500,
            optimizer: AdamW::default(),
            frames: 8,
            scene: SceneSpec::default(),
            log_every: 50,
            cap: DEFAULT_CAP,
            align: Align::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        self.net.validate()?;
        self.scene.validate()?;
        if (self.scene.height, self.scene.width) != (self.net.height, self.net.width) {
            return bad(
                "scene",
                format!(
                    "scene extent {}x{} differs from network input {}x{}",
                    self.scene.height, self.scene.width, self.net.height, self.net.width
                ),
            );
        }
        if self.frames == 0 {
            return bad("frames", "need at least one frame".into());
        }
        if self.log_every == 0 {
            return bad("log_every", "must be positive".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr", format!("must be positive, got {}", self.optimizer.lr));
        }
        if !(self.cap > 0.0) {
            return bad("cap", format!("must be positive, got {}", self.cap));
        }
        Ok(())
    }
}

/// One CSV line: the loss and per-strategy metrics at `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub loss: f64,
    pub metrics: Vec<(Align, DepthMetrics)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    /// Training loss before each update.
    pub losses: Vec<f64>,
    pub rows: Vec<ReportRow>,
}

impl OverfitReport {
    pub fn last(&self) -> &ReportRow {
        self.rows.last().expect("baseline row always present")
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "loss".to_string()];
        if let Some(r) = self.rows.first() {
            for (a, _) in &r.metrics {
                h.extend(DepthMetrics::FIELDS.iter().map(|f| format!("{}_{f}", a.name())));
            }
        }
        h
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.loss.to_string()];
            for (_, m) in &r.metrics {
                rec.extend(m.values().iter().map(f64::to_string));
            }
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Maps `[0, 1]` colours to roughly zero-mean unit-range inputs.
pub fn normalize_image<T: Float>(img: &Tensor<T>) -> Tensor<T> {
    let (m, s) = (T::of(0.45), T::of(0.225));
    img.map(|v| (v - m) / s)
}

/// Mean over frames of the metrics of each frame, every frame aligned on
/// its own.
pub fn evaluate_frames(pred: &Tensor<f64>, gt: &Tensor<f64>, cap: f64, align: Align) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "evaluate_frames",
            format!("{:?}", gt.shape()),
            pred.shape(),
        ));
    }
    let n = pred.shape()[0];
    let per = pred.numel() / n;
    let mut all = Vec::with_capacity(n);
    for f in 0..n {
        let p = &pred.data()[f * per..(f + 1) * per];
        let g = &gt.data()[f * per..(f + 1) * per];
        let mask: Vec<bool> = g.iter().map(|&v| v > 0.0 && v <= cap).collect();
        all.push(evaluate(p, g, &mask, cap, align)?.1);
    }
    Ok(DepthMetrics::mean(&all))
}

/// A model, its parameters and a fixed frame set.
pub struct Trainer<T: Float> {
    pub cfg: TrainConfig,
    pub net: Net,
    pub store: ParamStore<T>,
    image: Tensor<T>,
    log_gt: Tensor<T>,
    gt: Tensor<f64>,
    adam: AdamState<T>,
}

impl<T: Float> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (image, depth) = synth_batch::<f64>(&cfg.scene, cfg.frames)?;
        Self::with_frames(cfg, &image, &depth)
    }

    /// Uses the given `[N, 3, H, W]` images and `[N, 1, H, W]` depths.
    pub fn with_frames(cfg: TrainConfig, image: &Tensor<f64>, depth: &Tensor<f64>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let net = Net::new(&mut store, cfg.net.clone())?;
        let adam = AdamState::new(&store);
        Ok(Trainer {
            net,
            adam,
            image: normalize_image(&image.cast()),
            log_gt: depth.map(f64::ln).cast(),
            gt: depth.clone(),
            store,
            cfg,
        })
    }

    /// Loss and predicted depth at the current parameters, plus the
    /// parameter gradients when `train` is set.
    fn pass(&self, train: bool) -> Result<(f64, Tensor<f64>, Option<Vec<(ParamId, Tensor<T>)>>)> {
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(self.image.clone());
        let disp = self.net.forward_full_res(&mut g, x)?;
        let ld = log_depth(&mut g, disp)?;
        let target = g.constant(self.log_gt.clone());
        let diff = g.sub(ld, target)?;
        let a = g.abs(diff)?;
        let loss = g.mean_all(a);
        let value = g.value(loss).data()[0].f64();
        let depth = disp_to_depth(&g.value(disp).cast::<f64>())?;
        let grads = if train {
            Some(g.backward(loss)?.for_store(&self.store))
        } else {
            None
        };
        Ok((value, depth, grads))
    }

    fn row(&self, step: usize, loss: f64, depth: &Tensor<f64>) -> Result<ReportRow> {
        let metrics = self
            .cfg
            .align
            .iter()
            .map(|&a| Ok((a, evaluate_frames(depth, &self.gt, self.cfg.cap, a)?)))
            .collect::<Result<_>>()?;
        Ok(ReportRow { step, loss, metrics })
    }

    /// Trains for `cfg.steps` updates, recording a report row every
    /// `log_every` steps and after the last one.
    pub fn run(&mut self) -> Result<OverfitReport> {
        let mut losses = Vec::with_capacity(self.cfg.steps);
        let mut rows = Vec::new();
        for step in 0..self.cfg.steps {
            let (loss, depth, grads) = self.pass(true)?;
            if !loss.is_finite() {
                return Err(Error::Domain {
                    op: "train",
                    detail: format!("loss became {loss} at step {step}"),
                });
            }
            losses.push(loss);
            if step % self.cfg.log_every == 0 {
                let r = self.row(step, loss, &depth)?;
                log::info!(
                    "step {step:5} loss {loss:.5} abs_rel {:.4}",
                    r.metrics.first().map_or(f64::NAN, |m| m.1.abs_rel)
                );
                rows.push(r);
            }
            self.adam
                .update(&self.cfg.optimizer, &mut self.store, &grads.expect("train pass"));
        }
        let (loss, depth, _) = self.pass(false)?;
        let r = self.row(self.cfg.steps, loss, &depth)?;
        log::info!("final loss {loss:.5}");
        rows.push(r);
        Ok(OverfitReport { losses, rows })
    }

    /// Predicted depth for other frames.
    pub fn predict(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(normalize_image(&image.cast()));
        let disp = self.net.forward_full_res(&mut g, x)?;
        disp_to_depth(&g.value(disp).cast::<f64>())
    }
}

pub const REPORT_CSV: &str = "report.csv";
pub const LOSS_CSV: &str = "loss.csv";

/// Loads a JSON config, trains, and writes the report, the per-step loss
/// curve and a checkpoint into `out`.
pub fn overfit_run(config: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<OverfitReport> {
    let cfg: TrainConfig = load_config(config)?;
    overfit_with(cfg, out)
}

pub fn overfit_with(cfg: TrainConfig, out: impl AsRef<Path>) -> Result<OverfitReport> {
    let out = out.as_ref();
    let mut t = Trainer::<f32>::new(cfg)?;
    let report = t.run()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write_csv(out.join(REPORT_CSV))?;
    let mut w = csv::Writer::from_path(out.join(LOSS_CSV))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in report.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    save_checkpoint(out.join("checkpoint"), &t.store)?;
    Ok(report)
}

/// One configuration of the variant comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub axis: &'static str,
    pub variant: String,
    pub params: usize,
    pub train_loss: f64,
    pub held_out: DepthMetrics,
}

/// Every single-axis change from the default variants: upsampler,
/// information exchange, downsampler, disparity head and refinement.
pub fn variant_axes() -> Vec<(&'static str, String, Variants)> {
    let base = Variants::default();
    let mut out = vec![("default", "default".to_string(), base)];
    for k in UpKind::ALL.into_iter().filter(|&k| k != base.up) {
        out.push(("up", k.name().into(), Variants { up: k, ..base }));
    }
    for (k, n) in [(IeMode::NoIe, "no_ie"), (IeMode::PlainIe, "plain_ie")] {
        out.push(("ie", n.into(), Variants { ie: k, ..base }));
    }
    for k in DownKind::ALL.into_iter().filter(|&k| k != base.down) {
        out.push(("down", k.name().into(), Variants { down: k, ..base }));
    }
    out.push((
        "disp",
        "conv2d_disp".into(),
        Variants {
            disp: DispKind::Conv2dDisp,
            ..base
        },
    ));
    out.push((
        "refine",
        "rm".into(),
        Variants {
            refine: RefineKind::Rm,
            ..base
        },
    ));
    out
}

/// Trains every variant of [`variant_axes`] with `cfg` and scores it with
/// median alignment on `held_out` frames rendered from `held_out_seed`.
pub fn compare_variants(cfg: &TrainConfig, held_out_seed: u64, held_out: usize) -> Result<Vec<CompareRow>> {
    let (image, depth) = synth_batch::<f64>(&cfg.scene, cfg.frames)?;
    let test_spec = SceneSpec {
        seed: held_out_seed,
        ..cfg.scene
    };
    let (test_img, test_gt) = synth_batch::<f64>(&test_spec, held_out)?;
    let mut rows = Vec::new();
    for (axis, variant, v) in variant_axes() {
        let c = TrainConfig {
            net: cfg.net.clone().with_variants(v),
            ..cfg.clone()
        };
        let mut t = Trainer::<f32>::with_frames(c, &image, &depth)?;
        let report = t.run()?;
        let pred = t.predict(&test_img)?;
        let held_out = evaluate_frames(&pred, &test_gt, cfg.cap, Align::Median)?;
        log::info!("{axis}/{variant}: held-out abs_rel {:.4}", held_out.abs_rel);
        rows.push(CompareRow {
            axis,
            variant,
            params: t.store.num_scalars(),
            train_loss: report.last().loss,
            held_out,
        });
    }
    Ok(rows)
}

pub fn write_compare_csv(rows: &[CompareRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut h = vec!["axis", "variant", "params", "train_loss"];
    h.extend(DepthMetrics::FIELDS);
    w.write_record(h)?;
    for r in rows {
        let mut rec = vec![
            r.axis.to_string(),
            r.variant.clone(),
            r.params.to_string(),
            r.train_loss.to_string(),
        ];
        rec.extend(r.held_out.values().iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        let net = NetConfig::tiny();
        TrainConfig {
            scene: SceneSpec {
                height: net.height,
                width: net.width,
                ..SceneSpec::default()
            },
            net,
            steps: 6,
            frames: 2,
            log_every: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("p", &[3], crate::param::Init::Zero).unwrap();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut st = AdamState::new(&store);
        st.update(
            &opt,
            &mut store,
            &[(id, Tensor::new(&[3], vec![2.0, -0.5, 0.0]).unwrap())],
        );
        let p = store.value(id).data();
        assert!((p[0] + 1e-3).abs() < 1e-9 && (p[1] - 1e-3).abs() < 1e-9 && p[2] == 0.0);
    }

    #[test]
    fn zero_steps_is_baseline_only() {
        let r = Trainer::<f32>::new(TrainConfig { steps: 0, ..small() })
            .unwrap()
            .run()
            .unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].step, 0);
    }

    #[test]
    fn rows_and_header() {
        let r = Trainer::<f32>::new(small()).unwrap().run().unwrap();
        assert_eq!(r.losses.len(), 6);
        assert_eq!(r.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 3, 6]);
        let h = r.header();
        assert_eq!(h.len(), 2 + 4 * 7);
        assert_eq!(h[2], "median_abs_rel");
        assert_eq!(r.rows[0].loss, r.losses[0]);
    }

    #[test]
    fn mismatched_scene_rejected() {
        let mut c = small();
        c.scene.width = 48;
        assert!(matches!(c.validate(), Err(Error::Config { ref path, .. }) if path == "scene"));
    }

    #[test]
    fn axes_cover_every_variant_once() {
        let axes = variant_axes();
        assert_eq!(axes.len(), 1 + 4 + 2 + 7 + 1 + 1);
        let mut names: Vec<_> = axes.iter().map(|(a, n, _)| format!("{a}/{n}")).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), axes.len());
    }
}
