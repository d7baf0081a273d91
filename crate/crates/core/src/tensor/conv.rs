//! Matrix products and convolutions.
//!
//! Convolutions lower to im2col + GEMM per (sample, group). The GEMM is
//! single-threaded with fixed blocking, so every output element has a
//! fixed accumulation order.

use super::{dims4, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Float;

/// `c[m x n] += op(a)[m x k] * op(b)[k x n]` on row-major buffers, where
/// `ta`/`tb` mean the buffer stores the transpose.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Float>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made through the strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let (ra, rb) = (a.len(), b.len());
    if ra < 2 || rb < 2 {
        return Err(Error::shape("matmul", "rank >= 2 operands", if ra < 2 { a } else { b }));
    }
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (k2, n) = (b[rb - 2], b[rb - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("rhs with {k} rows"), b));
    }
    let batch: usize = a[..ra - 2].iter().product();
    let shared = rb == 2;
    if !shared && a[..ra - 2] != b[..rb - 2] {
        return Err(Error::shape("matmul", format!("batch dims {:?}", &a[..ra - 2]), b));
    }
    Ok((batch, m, k, n, shared))
}

/// Batched matrix product `[.., m, k] x [.., k, n]`. A rank-2 right
/// operand is shared across the batch.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    if shared {
        gemm(batch * m, k, n, a.data(), false, b.data(), false, &mut out);
    } else {
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn matmul_backward<T: Float>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    if shared {
        gemm(batch * m, n, k, dc.data(), false, b.data(), true, &mut da);
        gemm(k, batch * m, n, a.data(), true, dc.data(), false, &mut db);
    } else {
        for i in 0..batch {
            let dci = &dc.data()[i * m * n..];
            gemm(
                m,
                n,
                k,
                dci,
                false,
                &b.data()[i * k * n..],
                true,
                &mut da[i * m * k..(i + 1) * m * k],
            );
            gemm(
                k,
                m,
                n,
                &a.data()[i * m * k..],
                true,
                dci,
                false,
                &mut db[i * k * n..(i + 1) * k * n],
            );
        }
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    ))
}

/// Stride, zero padding and group count of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom {
        stride: (1, 1),
        padding: (0, 0),
        groups: 1,
    };

    /// Stride 1 with `k // 2` padding on each side.
    pub fn same(kh: usize, kw: usize) -> Self {
        ConvGeom {
            stride: (1, 1),
            padding: (kh / 2, kw / 2),
            groups: 1,
        }
    }

    pub fn with_stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Spatial layout of one im2col lowering: an `h x w` plane read by a
/// `kh x kw` window onto an `oh x ow` grid.
#[derive(Clone, Copy)]
struct Window {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Window {
    fn new(h: usize, w: usize, kh: usize, kw: usize, geom: ConvGeom, op: &'static str) -> Result<Self> {
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.padding;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(
                op,
                format!("kernel {kh}x{kw} fitting padded input"),
                &[h, w],
            ));
        }
        Ok(Window {
            h,
            w,
            kh,
            kw,
            oh: (h + 2 * ph - kh) / sh + 1,
            ow: (w + 2 * pw - kw) / sw + 1,
            geom,
        })
    }

    /// For kernel column `kj`, the output columns whose input column is
    /// in range, as `(first, end)`.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (sw, pw) = (self.geom.stride.1, self.geom.padding.1);
        // iw = ow * sw + kj - pw must lie in [0, w)
        let first = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
        let end = if self.w + pw > kj {
            ((self.w + pw - kj - 1) / sw + 1).min(self.ow)
        } else {
            0
        };
        (first, end.max(first))
    }

    /// Lowers `channels` planes into `[channels * kh * kw, oh * ow]`.
    fn im2col<T: Float>(&self, src: &[T], channels: usize, col: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let p = self.oh * self.ow;
        let mut row = 0;
        for c in 0..channels {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (first, end) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..first].fill(T::zero());
                        line[end..].fill(T::zero());
                        for ox in first..end {
                            line[ox] = srow[ox * sw + kj - pw];
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters `col` back onto the planes.
    fn col2im<T: Float>(&self, col: &[T], channels: usize, dst: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let p = self.oh * self.ow;
        let mut row = 0;
        for c in 0..channels {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &col[row * p..(row + 1) * p];
                    let (first, end) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in first..end {
                            let ix = ox * sw + kj - pw;
                            drow[ix] = drow[ix] + line[ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    win: Window,
}

fn conv_dims(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    let (n, cin, h, wd) = dims4("conv2d", x)?;
    let (cout, cin_g, kh, kw) = dims4("conv2d", w)?;
    let g = geom.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return Err(Error::shape("conv2d", format!("weight [{cout}, {cin}/{g}, kh, kw]"), w));
    }
    Ok(ConvDims {
        n,
        cin,
        cout,
        cin_g,
        cout_g: cout / g,
        win: Window::new(h, wd, kh, kw, geom, "conv2d")?,
    })
}

fn check_bias<T: Float>(bias: Option<&Tensor<T>>, c: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c] => Err(Error::shape(op, format!("bias [{c}]"), b.shape())),
        _ => Ok(()),
    }
}

/// 2D cross-correlation of `x [N, Cin, H, W]` with `w [Cout, Cin/groups,
/// kh, kw]`, zero padded.
pub fn conv2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeom) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    check_bias(bias, d.cout, "conv2d")?;
    let win = d.win;
    let (p, k) = (win.oh * win.ow, d.cin_g * win.kh * win.kw);
    let plane_in = win.h * win.w;
    let pointwise = geom.is_pointwise(win.kh, win.kw);
    let mut out = vec![T::zero(); d.n * d.cout * p];
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..d.n {
        for g in 0..geom.groups {
            let xg = &x.data()[(s * d.cin + g * d.cin_g) * plane_in..][..d.cin_g * plane_in];
            let cols: &[T] = if pointwise {
                xg
            } else {
                win.im2col(xg, d.cin_g, &mut col);
                &col
            };
            let wg = &w.data()[g * d.cout_g * k..(g + 1) * d.cout_g * k];
            let og = &mut out[(s * d.cout + g * d.cout_g) * p..][..d.cout_g * p];
            if let Some(b) = bias {
                for (co, chunk) in og.chunks_mut(p).enumerate() {
                    chunk.fill(b.data()[g * d.cout_g + co]);
                }
            }
            gemm(d.cout_g, k, p, wg, false, cols, false, og);
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.cout, win.oh, win.ow], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    let win = d.win;
    let (p, k) = (win.oh * win.ow, d.cin_g * win.kh * win.kw);
    let plane_in = win.h * win.w;
    let pointwise = geom.is_pointwise(win.kh, win.kw);
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); d.cout];
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { k * p }];
    for s in 0..d.n {
        for g in 0..geom.groups {
            let dyg = &dy.data()[(s * d.cout + g * d.cout_g) * p..][..d.cout_g * p];
            for (co, chunk) in dyg.chunks(p).enumerate() {
                let acc = &mut db[g * d.cout_g + co];
                *acc = chunk.iter().fold(*acc, |a, &v| a + v);
            }
            let xg = &x.data()[(s * d.cin + g * d.cin_g) * plane_in..][..d.cin_g * plane_in];
            let cols: &[T] = if pointwise {
                xg
            } else {
                win.im2col(xg, d.cin_g, &mut col);
                &col
            };
            let dwg = &mut dw[g * d.cout_g * k..(g + 1) * d.cout_g * k];
            gemm(d.cout_g, p, k, dyg, false, cols, true, dwg);
            if let Some(dx) = dx.as_mut() {
                let wg = &w.data()[g * d.cout_g * k..(g + 1) * d.cout_g * k];
                let dxg = &mut dx[(s * d.cin + g * d.cin_g) * plane_in..][..d.cin_g * plane_in];
                if pointwise {
                    gemm(k, d.cout_g, p, wg, true, dyg, false, dxg);
                } else {
                    dcol.fill(T::zero());
                    gemm(k, d.cout_g, p, wg, true, dyg, false, &mut dcol);
                    win.col2im(&dcol, d.cin_g, dxg);
                }
            }
        }
    }
    Ok((
        dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![d.cout], db),
    ))
}

struct ConvTDims {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    /// Window over the *output* plane, mapping it onto the `h x w` input grid.
    win: Window,
}

fn convt_dims(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<ConvTDims> {
    let (n, cin, h, wd) = dims4("conv_transpose2d", x)?;
    let (cin2, cout, kh, kw) = dims4("conv_transpose2d", w)?;
    if cin2 != cin || geom.groups != 1 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("weight [{cin}, Cout, kh, kw] with one group"),
            w,
        ));
    }
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let oh = ((h - 1) * sh + kh)
        .checked_sub(2 * ph)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::shape("conv_transpose2d", "positive output extent", x))?;
    let ow = ((wd - 1) * sw + kw)
        .checked_sub(2 * pw)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::shape("conv_transpose2d", "positive output extent", x))?;
    let win = Window::new(oh, ow, kh, kw, geom, "conv_transpose2d")?;
    debug_assert_eq!((win.oh, win.ow), (h, wd));
    Ok(ConvTDims {
        n,
        cin,
        cout,
        h,
        w: wd,
        win,
    })
}

/// Transposed convolution (the adjoint of [`conv2d`]) with weight
/// `[Cin, Cout, kh, kw]`.
pub fn conv_transpose2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let d = convt_dims(x.shape(), w.shape(), geom)?;
    check_bias(bias, d.cout, "conv_transpose2d")?;
    let win = d.win;
    let (p, k) = (d.h * d.w, d.cout * win.kh * win.kw);
    let plane_out = win.h * win.w;
    let mut out = vec![T::zero(); d.n * d.cout * plane_out];
    let mut col = vec![T::zero(); k * p];
    for s in 0..d.n {
        let xs = &x.data()[s * d.cin * p..(s + 1) * d.cin * p];
        col.fill(T::zero());
        gemm(k, d.cin, p, w.data(), true, xs, false, &mut col);
        let os = &mut out[s * d.cout * plane_out..(s + 1) * d.cout * plane_out];
        if let Some(b) = bias {
            for (c, chunk) in os.chunks_mut(plane_out).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        win.col2im(&col, d.cout, os);
    }
    Ok(Tensor::from_parts(vec![d.n, d.cout, win.h, win.w], out))
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let d = convt_dims(x.shape(), w.shape(), geom)?;
    let win = d.win;
    let (p, k) = (d.h * d.w, d.cout * win.kh * win.kw);
    let plane_out = win.h * win.w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); d.cout];
    let mut col = vec![T::zero(); k * p];
    for s in 0..d.n {
        let dys = &dy.data()[s * d.cout * plane_out..(s + 1) * d.cout * plane_out];
        for (c, chunk) in dys.chunks(plane_out).enumerate() {
            db[c] = chunk.iter().fold(db[c], |a, &v| a + v);
        }
        win.im2col(dys, d.cout, &mut col);
        let xs = &x.data()[s * d.cin * p..(s + 1) * d.cin * p];
        gemm(d.cin, p, k, xs, false, &col, true, &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(
                d.cin,
                k,
                p,
                w.data(),
                false,
                &col,
                false,
                &mut dx[s * d.cin * p..(s + 1) * d.cin * p],
            );
        }
    }
    Ok((
        dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![d.cout], db),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeom) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape().try_into().unwrap();
        let [cout, cin_g, kh, kw] = w.shape().try_into().unwrap();
        let (sh, sw) = g.stride;
        let (ph, pw) = g.padding;
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (wd + 2 * pw - kw) / sw + 1;
        let cout_g = cout / g.groups;
        let _ = cin;
        Tensor::from_fn(&[n, cout, oh, ow], |i| {
            let (s, co, oy, ox) = (i / (cout * oh * ow), i / (oh * ow) % cout, i / ow % oh, i % ow);
            let grp = co / cout_g;
            let mut acc = b[co];
            for ci in 0..cin_g {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.get(&[co, ci, ki, kj]) * x.get(&[s, grp * cin_g + ci, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let y = conv2d(&x, &w, None, ConvGeom::same(3, 3)).unwrap();
        let oracle = conv_oracle(&x, &w, &[0.0; 4], ConvGeom::same(3, 3));
        assert!(y.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn strided_grouped_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[2, 4, 7, 9], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[6, 2, 3, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let g = ConvGeom {
            stride: (2, 3),
            padding: (1, 1),
            groups: 2,
        };
        let y = conv2d(&x, &w, Some(&b), g).unwrap();
        let oracle = conv_oracle(&x, &w, b.data(), g);
        assert_eq!(y.shape(), oracle.shape());
        assert!(y.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeom {
            stride: (2, 2),
            padding: (1, 0),
            groups: 1,
        };
        let x = Tensor::<f64>::randn(&[2, 3, 8, 7], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[5, 3, 4, 3], 1.0, &mut rng);
        let cx = conv2d(&x, &w, None, g).unwrap();
        let y = Tensor::<f64>::randn(cx.shape(), 1.0, &mut rng);
        let ty = conv_transpose2d(&y, &w, None, g).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn batched_matmul_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 3, 5, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for r in 0..4 {
                    for q in 0..2 {
                        let want: f64 = (0..5).map(|t| a.get(&[i, j, r, t]) * b.get(&[i, j, t, q])).sum();
                        assert!((c.get(&[i, j, r, q]) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
