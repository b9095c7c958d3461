//! Primitive tensor ops with recorded backward rules.

use crate::error::{Error, Result};

use super::tensor::{bcast_offsets, broadcast_shape, row_major_strides, Tensor};

// ── Elementwise binary ops with broadcasting ────────────────────────────────

fn binary_op(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    // d out / d a and d out / d b at (a, b)
    dfa: fn(f64, f64) -> f64,
    dfb: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    let offs_a = bcast_offsets(&out_shape, a.shape());
    let offs_b = bcast_offsets(&out_shape, b.shape());

    let ad = a.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(numel);
    match (&offs_a, &offs_b) {
        (None, None) => {
            for i in 0..numel {
                data.push(f(ad[i], bd[i]));
            }
        }
        _ => {
            for i in 0..numel {
                let ai = offs_a.as_ref().map_or(i, |o| o[i]);
                let bi = offs_b.as_ref().map_or(i, |o| o[i]);
                data.push(f(ad[ai], bd[bi]));
            }
        }
    }

    let (ac, bc) = (a.clone(), b.clone());
    let (oa, ob) = (offs_a, offs_b);
    let backward = Box::new(move |g: &[f64]| {
        let ad = ac.data();
        let bd = bc.data();
        let mut ga = vec![0.0; ad.len()];
        let mut gb = vec![0.0; bd.len()];
        for i in 0..g.len() {
            let ai = oa.as_ref().map_or(i, |o| o[i]);
            let bi = ob.as_ref().map_or(i, |o| o[i]);
            ga[ai] += g[i] * dfa(ad[ai], bd[bi]);
            gb[bi] += g[i] * dfb(ad[ai], bd[bi]);
        }
        vec![ga, gb]
    });

    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        backward,
    ))
}

fn unary_op(
    t: &Tensor,
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
    let tc = t.clone();
    let backward = Box::new(move |g: &[f64]| {
        let xd = tc.data();
        vec![g.iter().zip(xd).map(|(&gi, &x)| gi * df(x)).collect()]
    });
    Tensor::from_op(data, t.shape().to_vec(), vec![t.clone()], backward)
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op("add", self, rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op("sub", self, rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op("mul", self, rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(&self) -> Tensor {
        unary_op(self, |x| -x, |_| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x * c).collect();
        let backward = Box::new(move |g: &[f64]| vec![g.iter().map(|&gi| gi * c).collect()]);
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], backward)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x + c).collect();
        let backward = Box::new(move |g: &[f64]| vec![g.to_vec()]);
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], backward)
    }

    pub fn sin(&self) -> Tensor {
        unary_op(self, f64::sin, f64::cos)
    }

    pub fn cos(&self) -> Tensor {
        unary_op(self, f64::cos, |x| -x.sin())
    }

    pub fn exp(&self) -> Tensor {
        unary_op(self, f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        unary_op(self, f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary_op(self, f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn tanh(&self) -> Tensor {
        unary_op(self, f64::tanh, |x| 1.0 - x.tanh() * x.tanh())
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_op(self, sigmoid_scalar, |x| {
            let s = sigmoid_scalar(x);
            s * (1.0 - s)
        })
    }

    pub fn silu(&self) -> Tensor {
        unary_op(self, |x| x * sigmoid_scalar(x), |x| {
            let s = sigmoid_scalar(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn relu(&self) -> Tensor {
        unary_op(self, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&self) -> Tensor {
        unary_op(self, f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        unary_op(self, |x| x * x, |x| 2.0 * x)
    }

    // ── Matmul ─────────────────────────────────────────────────────────────

    /// Matrix product. Accepts `[.., m, k] @ [.., k, n]` with equal leading
    /// batch dims, or a 2-D right operand shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let lbatch = &ls[..ls.len() - 2];
        let rbatch = &rs[..rs.len() - 2];
        let shared_rhs = rbatch.is_empty();
        if k != k2 || (!shared_rhs && lbatch != rbatch) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let batch: usize = lbatch.iter().product();
        let mut out_shape = lbatch.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let ad = self.data();
        let bd = rhs.data();
        let mut data = vec![0.0; batch * m * n];
        for b in 0..batch {
            let a_off = b * m * k;
            let b_off = if shared_rhs { 0 } else { b * k * n };
            let o_off = b * m * n;
            mm_nn(
                &ad[a_off..a_off + m * k],
                &bd[b_off..b_off + k * n],
                &mut data[o_off..o_off + m * n],
                m,
                k,
                n,
            );
        }

        let (ac, bc) = (self.clone(), rhs.clone());
        let backward = Box::new(move |g: &[f64]| {
            let ad = ac.data();
            let bd = bc.data();
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for b in 0..batch {
                let a_off = b * m * k;
                let b_off = if shared_rhs { 0 } else { b * k * n };
                let o_off = b * m * n;
                // ga = g @ b^T
                mm_nt(
                    &g[o_off..o_off + m * n],
                    &bd[b_off..b_off + k * n],
                    &mut ga[a_off..a_off + m * k],
                    m,
                    n,
                    k,
                );
                // gb += a^T @ g (accumulates across batch when rhs shared)
                mm_tn(
                    &ad[a_off..a_off + m * k],
                    &g[o_off..o_off + m * n],
                    &mut gb[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                );
            }
            vec![ga, gb]
        });

        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    // ── Softmax / layer norm over the last axis ────────────────────────────

    pub fn softmax_last(&self) -> Result<Tensor> {
        let last = *self.shape().last().ok_or_else(|| {
            Error::invalid("softmax_last", "rank-0 tensor")
        })?;
        let rows = self.numel() / last;
        let xd = self.data();
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &xd[r * last..(r + 1) * last];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                data[r * last + i] = e;
                sum += e;
            }
            for i in 0..last {
                data[r * last + i] /= sum;
            }
        }
        let y_saved = data.clone();
        let backward = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let o = r * last;
                let mut dot = 0.0;
                for i in 0..last {
                    dot += g[o + i] * y_saved[o + i];
                }
                for i in 0..last {
                    gx[o + i] = y_saved[o + i] * (g[o + i] - dot);
                }
            }
            vec![gx]
        });
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    /// Pre-affine layer normalization over the last axis.
    /// Rows with variance below 1e-12 normalize to zero (and pass no gradient).
    pub fn layer_norm_last(&self) -> Result<Tensor> {
        let last = *self.shape().last().ok_or_else(|| {
            Error::invalid("layer_norm_last", "rank-0 tensor")
        })?;
        let rows = self.numel() / last;
        let xd = self.data();
        let mut data = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * last..(r + 1) * last];
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / last as f64;
            if var < 1e-12 {
                // zero-variance convention: output zero, gradient zero
                inv_std[r] = 0.0;
                continue;
            }
            let is = 1.0 / var.sqrt();
            inv_std[r] = is;
            for i in 0..last {
                data[r * last + i] = (row[i] - mean) * is;
            }
        }
        let y_saved = data.clone();
        let backward = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let is = inv_std[r];
                if is == 0.0 {
                    continue;
                }
                let o = r * last;
                let mut g_mean = 0.0;
                let mut gy_mean = 0.0;
                for i in 0..last {
                    g_mean += g[o + i];
                    gy_mean += g[o + i] * y_saved[o + i];
                }
                g_mean /= last as f64;
                gy_mean /= last as f64;
                for i in 0..last {
                    gx[o + i] = is * (g[o + i] - g_mean - y_saved[o + i] * gy_mean);
                }
            }
            vec![gx]
        });
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    // ── Reductions ─────────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let backward = Box::new(move |g: &[f64]| vec![vec![g[0]; n]]);
        Tensor::from_op(vec![s], vec![], vec![self.clone()], backward)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        let backward = Box::new(move |g: &[f64]| vec![vec![g[0] / n as f64; n]]);
        Tensor::from_op(vec![s], vec![], vec![self.clone()], backward)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("mean_axis", axis, true)
    }

    fn reduce_axis(&self, op: &'static str, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid(op, format!("axis {} out of range for shape {:?}", axis, self.shape())));
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };

        let xd = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += xd[(o * len + l) * inner + i];
                }
            }
        }
        if mean {
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
        let numel = self.numel();
        let backward = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; numel];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![gx]
        });
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], backward))
    }

    // ── Shape ops ──────────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::UnexpectedShape {
                op: "reshape",
                expected: self.shape().to_vec(),
                got: shape.to_vec(),
            });
        }
        let backward = Box::new(move |g: &[f64]| vec![g.to_vec()]);
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if perm.len() != rank || {
            let mut seen = vec![false; rank];
            perm.iter().any(|&p| {
                if p >= rank || seen[p] {
                    true
                } else {
                    seen[p] = true;
                    false
                }
            })
        } {
            return Err(Error::invalid(
                "permute",
                format!("invalid permutation {:?} for rank {}", perm, rank),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = row_major_strides(&in_shape);
        let numel = self.numel();

        let permuted_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let xd = self.data();
        let mut data = Vec::with_capacity(numel);
        let mut coords = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..numel {
            data.push(xd[off]);
            for d in (0..rank).rev() {
                coords[d] += 1;
                off += permuted_strides[d];
                if coords[d] < out_shape[d] {
                    break;
                }
                off -= permuted_strides[d] * out_shape[d];
                coords[d] = 0;
            }
        }

        let os = out_shape.clone();
        let ps = permuted_strides;
        let backward = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; numel];
            let rank = os.len();
            let mut coords = vec![0usize; rank];
            let mut off = 0usize;
            for gi in g.iter().take(numel) {
                gx[off] += gi;
                for d in (0..rank).rev() {
                    coords[d] += 1;
                    off += ps[d];
                    if coords[d] < os[d] {
                        break;
                    }
                    off -= ps[d] * os[d];
                    coords[d] = 0;
                }
            }
            vec![gx]
        });
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], backward))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= self.rank() || b >= self.rank() {
            return Err(Error::invalid("transpose", "axis out of range"));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!(
                    "axis {} range {}..{} out of bounds for shape {:?}",
                    axis,
                    start,
                    start + len,
                    shape
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;

        let xd = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let numel = self.numel();
        let backward = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; numel];
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![gx]
        });
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], backward))
    }

    /// Gather entries along `axis` at the given indices.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("index_select", "axis out of range"));
        }
        let alen = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= alen) {
            return Err(Error::invalid(
                "index_select",
                format!("index {} out of range for axis length {}", bad, alen),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();

        let xd = self.data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let base = (o * alen + ix) * inner;
                data.extend_from_slice(&xd[base..base + inner]);
            }
        }
        let idx = indices.to_vec();
        let numel = self.numel();
        let n_idx = indices.len();
        let backward = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; numel];
            for o in 0..outer {
                for (j, &ix) in idx.iter().enumerate() {
                    let src = (o * n_idx + j) * inner;
                    let dst = (o * alen + ix) * inner;
                    for i in 0..inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            }
            vec![gx]
        });
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], backward))
    }

    /// Concatenate along `axis`. All other dims must match.
    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::invalid("concat", "no tensors given"));
        }
        let first = tensors[0].shape();
        if axis >= first.len() {
            return Err(Error::invalid("concat", "axis out of range"));
        }
        for t in tensors.iter().skip(1) {
            let s = t.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = first.to_vec();
        out_shape[axis] = total;

        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&lens) {
                let xd = t.data();
                let base = o * len * inner;
                data.extend_from_slice(&xd[base..base + len * inner]);
            }
        }
        let parents: Vec<Tensor> = tensors.iter().map(|&t| t.clone()).collect();
        let lens_b = lens;
        let backward = Box::new(move |g: &[f64]| {
            let mut out: Vec<Vec<f64>> = lens_b
                .iter()
                .map(|&len| vec![0.0; outer * len * inner])
                .collect();
            for o in 0..outer {
                let mut col = 0usize;
                for (ti, &len) in lens_b.iter().enumerate() {
                    let src = (o * total + col) * inner;
                    let dst = o * len * inner;
                    out[ti][dst..dst + len * inner]
                        .copy_from_slice(&g[src..src + len * inner]);
                    col += len;
                }
            }
            out
        });
        Ok(Tensor::from_op(data, out_shape, parents, backward))
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// out[m,n] += a[m,k] @ b[k,n]
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m,k] += g[m,n] @ b[k,n]^T
fn mm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[p] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T @ g[m,n]
fn mm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}
