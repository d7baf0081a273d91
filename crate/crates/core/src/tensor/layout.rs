//! Pure element permutations: every function here moves values without
//! arithmetic, so value multisets are preserved bit-exactly.

use super::{dims4, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Float;

/// Spatial axis of an NCHW map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Height,
    Width,
}

pub fn permute<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("permutation of {rank} axes"), perm));
    }
    let in_strides = x.strides();
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    if rank == 0 {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let (inner, inner_stride) = (shape[rank - 1], strides[rank - 1]);
    let data = x.data();
    'outer: loop {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                break 'outer;
            }
            axis -= 1;
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            off -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat<T: Float>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat", "at least one input", &[]))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis < {rank}"), first.shape()));
    }
    for t in xs {
        let ok = t.rank() == rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("shape compatible with {:?}", first.shape()),
                t.shape(),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// `len` entries of `axis` starting at `start`.
pub fn slice_axis<T: Float>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!("axis {axis} range {start}..{}", start + len),
            x.shape(),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let extent = x.shape()[axis];
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`slice_axis`]: places `g` into a zero tensor of `full`.
pub(crate) fn unslice_axis<T: Float>(g: &Tensor<T>, full: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let outer: usize = full[..axis].iter().product();
    let inner: usize = full[axis + 1..].iter().product();
    let (extent, len) = (full[axis], g.shape()[axis]);
    let mut out = vec![T::zero(); full.iter().product()];
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(full.to_vec(), out)
}

/// Moves `r x r` channel groups into space: output `(c, h*r + i, w*r + j)`
/// reads input channel `c*r*r + i*r + j` at `(h, w)`.
pub fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c4, h, w) = dims4("pixel_shuffle", x.shape())?;
    if r == 0 || c4 % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channels divisible by {}", r * r),
            x.shape(),
        ));
    }
    let c = c4 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for s in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = &d[((s * c4 + ch * r * r + i * r + j) * h) * w..][..h * w];
                    for y in 0..h {
                        let row = &mut out[((s * c + ch) * oh + y * r + i) * ow..][..ow];
                        for xx in 0..w {
                            row[xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Inverse of [`pixel_shuffle`] (space-to-depth).
pub fn pixel_unshuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dims4("pixel_unshuffle", x.shape())?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial extents divisible by {r}"),
            x.shape(),
        ));
    }
    let (h, w, c4) = (oh / r, ow / r, c * r * r);
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for s in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst = &mut out[((s * c4 + ch * r * r + i * r + j) * h) * w..][..h * w];
                    for y in 0..h {
                        let row = &d[((s * c + ch) * oh + y * r + i) * ow..][..ow];
                        for xx in 0..w {
                            dst[y * w + xx] = row[xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c4, h, w], out))
}

/// Folds one spatial axis into channels: for `Axis::Height`, output
/// channel `c*s + r` at row `h` holds input row `h*s + r` of channel `c`.
pub fn axial_fold<T: Float>(x: &Tensor<T>, axis: Axis, s: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("axial_fold", x.shape())?;
    let extent = if axis == Axis::Height { h } else { w };
    if s == 0 || extent % s != 0 {
        return Err(Error::shape(
            "axial_fold",
            format!("{axis:?} divisible by {s}"),
            x.shape(),
        ));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(x.numel());
    match axis {
        Axis::Height => {
            let oh = h / s;
            for b in 0..n {
                for ch in 0..c {
                    for r in 0..s {
                        for y in 0..oh {
                            let off = ((b * c + ch) * h + y * s + r) * w;
                            out.extend_from_slice(&d[off..off + w]);
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![n, c * s, oh, w], out))
        }
        Axis::Width => {
            let ow = w / s;
            for b in 0..n {
                for ch in 0..c {
                    for r in 0..s {
                        for y in 0..h {
                            let row = &d[((b * c + ch) * h + y) * w..][..w];
                            out.extend((0..ow).map(|xx| row[xx * s + r]));
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![n, c * s, h, ow], out))
        }
    }
}

/// Inverse of [`axial_fold`].
pub fn axial_unfold<T: Float>(x: &Tensor<T>, axis: Axis, s: usize) -> Result<Tensor<T>> {
    let (n, cs, h, w) = dims4("axial_unfold", x.shape())?;
    if s == 0 || cs % s != 0 {
        return Err(Error::shape(
            "axial_unfold",
            format!("channels divisible by {s}"),
            x.shape(),
        ));
    }
    let c = cs / s;
    let (oh, ow) = match axis {
        Axis::Height => (h * s, w),
        Axis::Width => (h, w * s),
    };
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for b in 0..n {
        for ch in 0..c {
            for r in 0..s {
                let src = &d[((b * cs + ch * s + r) * h) * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let (ty, tx) = match axis {
                            Axis::Height => (y * s + r, xx),
                            Axis::Width => (y, xx * s + r),
                        };
                        out[((b * c + ch) * oh + ty) * ow + tx] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_single_pixel_layout() {
        // [a, b, c, d] in four channels -> [[a, b], [c, d]]
        let x = Tensor::<f64>::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_shape_contract() {
        let x = Tensor::<f64>::from_fn(&[2, 8, 3, 5], |i| i as f64);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 10]);
        assert!(pixel_unshuffle(&y, 2).unwrap().bit_eq(&x));
        assert!(pixel_shuffle(&Tensor::<f64>::zeros(&[1, 6, 2, 2]), 2).is_err());
    }

    #[test]
    fn fold_height_two_rows() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 1], vec![5.0, 7.0]).unwrap();
        let y = axial_fold(&x, Axis::Height, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert_eq!(y.data(), &[5.0, 7.0]);
    }

    #[test]
    fn fold_both_axes_equals_unshuffle() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 6], |i| i as f64 * 0.5);
        let hw = axial_fold(&axial_fold(&x, Axis::Height, 2).unwrap(), Axis::Width, 2).unwrap();
        assert!(hw.bit_eq(&pixel_unshuffle(&x, 2).unwrap()));
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = [2, 0, 1];
        let y = permute(&x, &p).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        assert!(permute(&y, &inverse_perm(&p)).unwrap().bit_eq(&x));
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 2, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert!(slice_axis(&c, 1, 0, 1).unwrap().bit_eq(&a));
        assert!(slice_axis(&c, 1, 1, 2).unwrap().bit_eq(&b));
        let back = unslice_axis(&b, &[2, 3, 3], 1, 1);
        assert_eq!(back.get(&[1, 0, 2]), 0.0);
        assert_eq!(back.get(&[1, 2, 2]), b.get(&[1, 1, 2]));
    }
}
