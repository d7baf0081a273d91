//! Depth error metrics and median/mean scale alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to predictions and ground truth before scoring.
pub const MIN_DEPTH: f64 = 0.1;
/// Default upper clamp in meters.
pub const DEFAULT_CAP: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const FIELDS: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Elementwise mean over frames.
    pub fn mean(all: &[DepthMetrics]) -> DepthMetrics {
        let n = all.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3] = acc.map(|v| v / n);
        DepthMetrics {
            abs_rel,
            sq_rel,
            rmse,
            rmse_log,
            delta1,
            delta2,
            delta3,
        }
    }
}

fn check_lengths(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::shape(
            "depth metrics",
            format!("{} pixels in pred, gt and mask", gt.len()),
            &[pred.len(), mask.len()],
        ));
    }
    Ok(())
}

fn check_positive(v: &[f64], mask: &[bool]) -> Result<()> {
    for (index, (&value, &m)) in v.iter().zip(mask).enumerate() {
        if m && !(value > 0.0) {
            return Err(Error::NonPositiveDepth { index, value });
        }
    }
    Ok(())
}

/// Metrics over the pixels selected by `mask`, after clamping both maps
/// to `[MIN_DEPTH, cap]`.
pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool], cap: f64) -> Result<DepthMetrics> {
    check_lengths(pred, gt, mask)?;
    check_positive(pred, mask)?;
    check_positive(gt, mask)?;
    let mut n = 0usize;
    let mut s = [0.0f64; 7];
    for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        let d = p.clamp(MIN_DEPTH, cap);
        let g = g.clamp(MIN_DEPTH, cap);
        let diff = d - g;
        let ratio = (d / g).max(g / d);
        s[0] += diff.abs() / g;
        s[1] += diff * diff / g;
        s[2] += diff * diff;
        s[3] += (d.ln() - g.ln()).powi(2);
        s[4] += f64::from(u8::from(ratio < 1.25));
        s[5] += f64::from(u8::from(ratio < 1.25 * 1.25));
        s[6] += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: s[0] / nf,
        sq_rel: s[1] / nf,
        rmse: (s[2] / nf).sqrt(),
        rmse_log: (s[3] / nf).sqrt(),
        delta1: s[4] / nf,
        delta2: s[5] / nf,
        delta3: s[6] / nf,
    })
}

/// Lower-middle order statistic.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[(s.len() - 1) / 2]
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn masked(v: &[f64], mask: &[bool]) -> Vec<f64> {
    v.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect()
}

/// Median and mean of the masked pixels of one map.
#[derive(Debug, Clone, Copy)]
struct Stats {
    median: f64,
    mean: f64,
}

impl Stats {
    fn of(v: &[f64], mask: &[bool]) -> Result<Self> {
        let m = masked(v, mask);
        if m.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Stats {
            median: median(&m),
            mean: mean(&m),
        })
    }

    fn blend(&self, zeta: f64) -> f64 {
        zeta * self.median + (1.0 - zeta) * self.mean
    }
}

fn ratio(gt: &Stats, pred: &Stats, zeta: f64) -> Result<f64> {
    let den = pred.blend(zeta);
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(gt.blend(zeta) / den)
}

/// `(z med(gt) + (1 - z) mean(gt)) / (z med(pred) + (1 - z) mean(pred))`.
pub fn scale_factor(pred: &[f64], gt: &[f64], mask: &[bool], zeta: f64) -> Result<f64> {
    check_lengths(pred, gt, mask)?;
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::Domain {
            op: "scale_factor",
            detail: format!("zeta {zeta} outside [0, 1]"),
        });
    }
    ratio(&Stats::of(gt, mask)?, &Stats::of(pred, mask)?, zeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleAlignResult {
    pub zeta: f64,
    pub scale: f64,
    pub abs_rel: f64,
}

/// The eleven blend weights `0.0, 0.1, ..., 1.0`.
pub fn zeta_grid() -> [f64; 11] {
    std::array::from_fn(|i| i as f64 / 10.0)
}

fn scaled(pred: &[f64], s: f64) -> Vec<f64> {
    pred.iter().map(|&p| p * s).collect()
}

/// Exhaustive search over [`zeta_grid`] for the scale minimising AbsRel
/// (as reported by [`compute_metrics`] at `cap`). Ties go to the larger
/// blend weight.
pub fn ada_search_scale(pred: &[f64], gt: &[f64], mask: &[bool], cap: f64) -> Result<ScaleAlignResult> {
    check_lengths(pred, gt, mask)?;
    let (gs, ps) = (Stats::of(gt, mask)?, Stats::of(pred, mask)?);
    let mut best: Option<ScaleAlignResult> = None;
    for &zeta in zeta_grid().iter().rev() {
        let scale = ratio(&gs, &ps, zeta)?;
        let abs_rel = compute_metrics(&scaled(pred, scale), gt, mask, cap)?.abs_rel;
        if best.is_none_or(|b| abs_rel < b.abs_rel) {
            best = Some(ScaleAlignResult { zeta, scale, abs_rel });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Align {
    /// Median ratio (blend weight 1).
    Median,
    /// Mean ratio (blend weight 0).
    Mean,
    /// Even blend (0.5).
    Fuse,
    /// Grid search.
    Ada,
}

impl Align {
    pub const ALL: [Align; 4] = [Align::Median, Align::Mean, Align::Fuse, Align::Ada];

    pub fn name(self) -> &'static str {
        match self {
            Align::Median => "median",
            Align::Mean => "mean",
            Align::Fuse => "fuse",
            Align::Ada => "ada",
        }
    }
}

/// Scales `pred` with the chosen strategy and scores it.
pub fn evaluate(pred: &[f64], gt: &[f64], mask: &[bool], cap: f64, align: Align) -> Result<(f64, DepthMetrics)> {
    let scale = match align {
        Align::Median => scale_factor(pred, gt, mask, 1.0)?,
        Align::Mean => scale_factor(pred, gt, mask, 0.0)?,
        Align::Fuse => scale_factor(pred, gt, mask, 0.5)?,
        Align::Ada => ada_search_scale(pred, gt, mask, cap)?.scale,
    };
    Ok((scale, compute_metrics(&scaled(pred, scale), gt, mask, cap)?))
}
