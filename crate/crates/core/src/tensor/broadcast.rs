use super::{strides_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Float;

/// Same-rank broadcasting: each axis pair must be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape("broadcast", format!("rank {}", a.len()), b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape("broadcast", format!("compatible with {a:?}"), b)),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    strides_of(shape)
        .into_iter()
        .zip(shape.iter().zip(out))
        .map(|(s, (&e, &o))| if e == 1 && o != 1 { 0 } else { s })
        .collect()
}

pub(crate) fn broadcast_binary<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let (ad, bd) = (a.data(), b.data());
    let rank = out_shape.len();
    if rank == 0 {
        return Ok(Tensor::from_parts(vec![], vec![f(ad[0], bd[0])]));
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for j in 0..inner {
            out.push(f(ad[oa + j * ia], bd[ob + j * ib]));
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return Ok(Tensor::from_parts(out_shape, out));
            }
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            oa -= sa[axis] * idx[axis];
            ob -= sb[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Sums `grad` down to `shape`, undoing a broadcast.
pub fn reduce_to_shape<T: Float>(grad: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    if shape.len() != grad.rank() {
        return Err(Error::shape("reduce_to_shape", format!("rank {}", grad.rank()), shape));
    }
    let target_strides = broadcast_strides(shape, grad.shape());
    let mut out = vec![T::zero(); shape.iter().product()];
    let gshape = grad.shape();
    let rank = gshape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad.data() {
        out[off] = out[off] + g;
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            off += target_strides[axis];
            if idx[axis] < gshape[axis] {
                break;
            }
            off -= target_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}
