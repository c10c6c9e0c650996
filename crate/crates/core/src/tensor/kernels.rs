use serde::{Deserialize, Serialize};

use super::{CsrMatrix, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        let r = match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        };
        if r {
            1.0
        } else {
            0.0
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast rule: align from the right, extents must be
/// equal or one of them 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

pub(crate) fn normalize_axis(axis: isize, rank: usize) -> Result<usize> {
    let r = rank as isize;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    Ok(a as usize)
}

pub(crate) fn normalize_axes(axes: Option<&[isize]>, rank: usize) -> Result<Vec<usize>> {
    match axes {
        None => Ok((0..rank).collect()),
        Some(list) => {
            let mut out = Vec::with_capacity(list.len());
            for &a in list {
                let a = normalize_axis(a, rank)?;
                if !out.contains(&a) {
                    out.push(a);
                }
            }
            out.sort_unstable();
            Ok(out)
        }
    }
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Strip leading unit extents.
fn trim_leading_ones(shape: &[usize]) -> &[usize] {
    let k = shape.iter().take_while(|&&d| d == 1).count();
    &shape[k..]
}

pub(crate) fn binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    if a.shape == b.shape {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let n: usize = out.iter().product();
    if ad.len() == n {
        if bd.len() == 1 {
            let y = bd[0];
            return Ok(Tensor::from_parts(out, ad.iter().map(|&x| f(x, y)).collect()));
        }
        let tb = trim_leading_ones(&b.shape);
        if !tb.is_empty() && out.ends_with(tb) {
            let inner = bd.len();
            let mut data = Vec::with_capacity(n);
            for chunk in ad.chunks_exact(inner) {
                data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
            return Ok(Tensor::from_parts(out, data));
        }
    }
    if bd.len() == n {
        if ad.len() == 1 {
            let x = ad[0];
            return Ok(Tensor::from_parts(out, bd.iter().map(|&y| f(x, y)).collect()));
        }
        let ta = trim_leading_ones(&a.shape);
        if !ta.is_empty() && out.ends_with(ta) {
            let inner = ad.len();
            let mut data = Vec::with_capacity(n);
            for chunk in bd.chunks_exact(inner) {
                data.extend(ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            return Ok(Tensor::from_parts(out, data));
        }
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = Vec::with_capacity(n);
    if n == 0 {
        return Ok(Tensor::from_parts(out, data));
    }
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for j in 0..last {
            data.push(f(ad[oa + j * la], bd[ob + j * lb]));
        }
        // advance the multi-index over all but the last axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return Ok(Tensor::from_parts(out, data));
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn sum_axes(t: &Tensor, axes: &[usize], keepdim: bool) -> Tensor {
    let shape = &t.shape;
    let rank = shape.len();
    let mut kept = shape.clone();
    for &a in axes {
        kept[a] = 1;
    }
    let out_shape: Vec<usize> = if keepdim {
        kept.clone()
    } else {
        (0..rank)
            .filter(|i| !axes.contains(i))
            .map(|i| shape[i])
            .collect()
    };
    let data = t.data();
    if axes.len() == rank {
        let s: f64 = data.iter().sum();
        return Tensor::from_parts(out_shape, vec![s]);
    }
    if axes.is_empty() {
        return Tensor::from_parts(out_shape, data.to_vec());
    }
    let nout: usize = kept.iter().product();
    // leading axes only: sum of chunks
    if axes.iter().enumerate().all(|(i, &a)| a == i) {
        let mut out = vec![0.0; nout];
        for chunk in data.chunks_exact(nout) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return Tensor::from_parts(out_shape, out);
    }
    // trailing axes only: sum within chunks
    if axes.iter().rev().enumerate().all(|(i, &a)| a == rank - 1 - i) {
        let inner = data.len() / nout.max(1);
        let out = if inner == 0 {
            vec![0.0; nout]
        } else {
            data.chunks_exact(inner).map(|c| c.iter().sum()).collect()
        };
        return Tensor::from_parts(out_shape, out);
    }
    let ostr = strides(&kept);
    let mut red_str = vec![0usize; rank];
    for i in 0..rank {
        if !axes.contains(&i) {
            red_str[i] = ostr[i];
        }
    }
    let mut out = vec![0.0; nout];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in data.iter() {
        out[off] += v;
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += red_str[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= red_str[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// Reduce a broadcast result back to `target` (the adjoint of broadcasting).
pub(crate) fn sum_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    let rank = t.rank();
    if target.len() > rank {
        return Err(TensorError::ShapeMismatch {
            op: "sum_to",
            lhs: t.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    let off = rank - target.len();
    let mut axes: Vec<usize> = (0..off).collect();
    for (i, &d) in target.iter().enumerate() {
        let s = t.shape[off + i];
        if d == 1 && s != 1 {
            axes.push(off + i);
        } else if d != s {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: t.shape.clone(),
                rhs: target.to_vec(),
            });
        }
    }
    let s = sum_axes(t, &axes, true);
    Ok(Tensor::from_parts(target.to_vec(), s.to_vec()))
}

pub(crate) fn broadcast_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    let ok = broadcast_shape(&t.shape, target).is_some_and(|s| s == target);
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast_to",
            lhs: t.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    let zero = Tensor::zeros(target);
    binary(t, &zero, "broadcast_to", |a, _| a)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the slices hold exactly m*k, k*n and m*n elements laid out
        // row-major with the strides passed here.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                k as isize,
                1,
                b.data().as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(vec![m, n], c))
}

pub(crate) fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(TensorError::InvalidAxis {
            axis: 1,
            rank: a.rank(),
        });
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub(crate) fn concat(parts: &[&Tensor], axis: isize) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::ShapeMismatch {
        op: "concat",
        lhs: vec![],
        rhs: vec![],
    })?;
    let rank = first.rank();
    let ax = normalize_axis(axis, rank)?;
    let mut out_shape = first.shape.clone();
    out_shape[ax] = 0;
    for p in parts {
        let same = p.rank() == rank && (0..rank).all(|i| i == ax || p.shape[i] == first.shape[i]);
        if !same {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        out_shape[ax] += p.shape[ax];
    }
    let outer: usize = first.shape[..ax].iter().product();
    let inner: usize = first.shape[ax + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[ax] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, len: usize, step: usize) -> Result<Tensor> {
    let extent = t.shape[axis];
    if len > 0 && (step == 0 || start + (len - 1) * step >= extent) {
        return Err(TensorError::IndexOutOfRange {
            index: (start + len.saturating_sub(1) * step) as isize,
            extent,
        });
    }
    let idx: Vec<usize> = (0..len).map(|i| start + i * step).collect();
    select(t, axis, &idx)
}

pub(crate) fn select(t: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidAxis {
            axis: axis as isize,
            rank: t.rank(),
        });
    }
    let extent = t.shape[axis];
    if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
        return Err(TensorError::IndexOutOfRange {
            index: bad as isize,
            extent,
        });
    }
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let d = t.data();
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        for &i in indices {
            data.extend_from_slice(&d[base + i * inner..base + (i + 1) * inner]);
        }
    }
    let mut shape = t.shape.clone();
    shape[axis] = indices.len();
    Ok(Tensor::from_parts(shape, data))
}

/// Adjoint of [`slice`]: embed `g` into zeros of `in_shape`.
pub(crate) fn slice_scatter(
    g: &Tensor,
    in_shape: &[usize],
    axis: usize,
    start: usize,
    step: usize,
) -> Result<Tensor> {
    let extent = in_shape[axis];
    let len = g.shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut out = vec![0.0; in_shape.iter().product()];
    let gd = g.data();
    for o in 0..outer {
        for i in 0..len {
            let dst = o * extent * inner + (start + i * step) * inner;
            let src = (o * len + i) * inner;
            out[dst..dst + inner].copy_from_slice(&gd[src..src + inner]);
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), out))
}

/// Apply a sparse matrix along `axis`: out[.., i, ..] = Σ_j W[i,j]·x[.., j, ..].
pub(crate) fn point_map(w: &CsrMatrix, x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() || x.shape[axis] != w.ncols() {
        return Err(TensorError::ShapeMismatch {
            op: "point_map",
            lhs: vec![w.nrows(), w.ncols()],
            rhs: x.shape.clone(),
        });
    }
    let n_in = w.ncols();
    let n_out = w.nrows();
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let xb = o * n_in * inner;
        let ob = o * n_out * inner;
        for i in 0..n_out {
            let dst = &mut out[ob + i * inner..ob + (i + 1) * inner];
            for (j, v) in w.row(i) {
                let src = &xd[xb + j * inner..xb + (j + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = n_out;
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rule() {
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[5, 1, 1], &[5, 1, 7, 1]), Some(vec![5, 5, 7, 1]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        assert_eq!(broadcast_shape(&[], &[4]), Some(vec![4]));
    }

    #[test]
    fn general_broadcast_matches_fast_paths() {
        let a = Tensor::new([2, 3], [1., 2., 3., 4., 5., 6.]).unwrap();
        let col = Tensor::new([2, 1], [10., 20.]).unwrap();
        let r = a.add(&col).unwrap();
        assert_eq!(r.data(), &[11., 12., 13., 24., 25., 26.]);
        let row = Tensor::new([1, 3], [1., 1., 1.]).unwrap();
        assert_eq!(a.mul(&row).unwrap().data(), a.data());
    }

    #[test]
    fn sums_over_middle_axes() {
        let t = Tensor::new([2, 2, 2], (0..8).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        let s = t.sum(Some(&[1]), false).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2., 4., 10., 12.]);
        let s = t.sum(Some(&[0, 2]), true).unwrap();
        assert_eq!(s.shape(), &[1, 2, 1]);
        assert_eq!(s.data(), &[0. + 1. + 4. + 5., 2. + 3. + 6. + 7.]);
    }

    #[test]
    fn sum_to_inverts_broadcast() {
        let t = Tensor::ones(&[4, 2, 3]);
        let s = sum_to(&t, &[2, 1]).unwrap();
        assert_eq!(s.data(), &[12., 12.]);
    }

    #[test]
    fn slice_scatter_is_adjoint_of_slice() {
        let t = Tensor::new([5], [1., 2., 3., 4., 5.]).unwrap();
        let s = slice(&t, 0, 1, 2, 2).unwrap();
        assert_eq!(s.data(), &[2., 4.]);
        let back = slice_scatter(&s, &[5], 0, 1, 2).unwrap();
        assert_eq!(back.data(), &[0., 2., 0., 4., 0.]);
    }
}
