use super::{dims4, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Float;

/// Source taps for half-pixel-centred 2x upsampling along one axis:
/// `(lower index, upper index, weight of upper)`.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling without corner alignment; borders clamp.
pub fn bilinear_up2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("bilinear_up2", x.shape())?;
    let (ty, tx) = (up2_taps(h), up2_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, ly) in &ty {
            let ly = T::of(ly);
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, lx) in &tx {
                let lx = T::of(lx);
                let top = r0[x0] + lx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + lx * (r1[x1] - r1[x0]);
                out.push(top + ly * (bottom - top));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn bilinear_up2_backward<T: Float>(input_shape: &[usize], g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("bilinear_up2", input_shape)?;
    let (ty, tx) = (up2_taps(h), up2_taps(w));
    let ow = 2 * w;
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let go = gplane[oy * ow + ox];
                let (gt, gb) = (go * (T::one() - ly), go * ly);
                plane[y0 * w + x0] = plane[y0 * w + x0] + gt * (T::one() - lx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + gt * lx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gb * (T::one() - lx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + gb * lx;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Max pooling without padding. Returns the pooled map and, per output
/// element, the flat input index of the first maximum in scan order.
pub fn max_pool2d<T: Float>(x: &Tensor<T>, k: usize, s: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = dims4("max_pool2d", x.shape())?;
    if k == 0 || s == 0 || h < k || w < k {
        return Err(Error::shape("max_pool2d", format!("spatial extents >= {k}"), x.shape()));
    }
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let d = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * s * w + ox * s;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oy * s + ki) * w + ox * s + kj;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn max_pool2d_backward<T: Float>(input_shape: &[usize], argmax: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (&i, &gv) in argmax.iter().zip(g.data()) {
        dx[i] = dx[i] + gv;
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} in range"), shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (d[at(j)] - m).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward<T: Float>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot = (0..len).fold(T::zero(), |acc, j| acc + gd[at(j)] * yd[at(j)]);
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dx))
}

/// Groups normalized together: one per leading index for rank >= 2,
/// otherwise the whole tensor.
fn norm_groups(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

fn moments<T: Float>(v: &[T]) -> (T, T) {
    let n = T::of(v.len() as f64);
    let mean = v.iter().fold(T::zero(), |a, &x| a + x) / n;
    let var = v.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    (mean, var.sqrt())
}

/// `(x - mean) / (sigma + eps)` per sample, population sigma.
pub fn standardize<T: Float>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let groups = norm_groups(x.shape());
    let eps = T::of(eps);
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks(x.numel() / groups) {
        let (mean, sigma) = moments(chunk);
        let s = sigma + eps;
        out.extend(chunk.iter().map(|&v| (v - mean) / s));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn standardize_backward<T: Float>(x: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Tensor<T> {
    let groups = norm_groups(x.shape());
    let per = x.numel() / groups;
    let nf = T::of(per as f64);
    let eps = T::of(eps);
    let mut dx = Vec::with_capacity(x.numel());
    for (xc, gc) in x.data().chunks(per).zip(g.data().chunks(per)) {
        let (mean, sigma) = moments(xc);
        let s = sigma + eps;
        let gmean = gc.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let gd = xc.iter().zip(gc).fold(T::zero(), |a, (&xv, &gv)| a + gv * (xv - mean));
        let coef = if sigma > T::zero() {
            gd / (s * s * nf * sigma)
        } else {
            T::zero()
        };
        dx.extend(
            xc.iter()
                .zip(gc)
                .map(|(&xv, &gv)| (gv - gmean) / s - coef * (xv - mean)),
        );
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}
