use super::{Op, Value};
use crate::error::{Error, Result};

/// Result shape of broadcasting `a` against `b` (numpy rules, right aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps every flat index of `out` to the flat index of `src` it reads from.
pub(crate) enum BroadcastMap {
    Identity,
    Splat,
    Indexed(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> BroadcastMap {
        if src == out {
            return BroadcastMap::Identity;
        }
        let src_n: usize = src.iter().product();
        if src_n == 1 {
            return BroadcastMap::Splat;
        }
        let rank = out.len();
        let offset = rank - src.len();
        // strides of src aligned to out, zero along broadcast axes
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            if src[i] != 1 {
                strides[i + offset] = acc;
            }
            acc *= src[i];
        }
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        BroadcastMap::Indexed(map)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Splat => 0,
            BroadcastMap::Indexed(m) => m[i],
        }
    }
}

fn binary(
    a: &Value,
    b: &Value,
    name: &'static str,
    f: impl Fn(f64, f64) -> f64,
    op: Op,
) -> Result<Value> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(
            name,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )
    })?;
    let ma = BroadcastMap::new(a.shape(), &out_shape);
    let mb = BroadcastMap::new(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let (da, db) = (a.data(), b.data());
    let data = (0..n).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect();
    Ok(Value::derived(out_shape, data, op))
}

fn unary(a: &Value, f: impl Fn(f64) -> f64, op: Op) -> Value {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Value::derived(a.shape().to_vec(), data, op)
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

impl Value {
    pub fn add(&self, other: &Value) -> Result<Value> {
        binary(self, other, "add", |x, y| x + y, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Value) -> Result<Value> {
        binary(self, other, "sub", |x, y| x - y, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Value) -> Result<Value> {
        binary(self, other, "mul", |x, y| x * y, Op::Mul(self.clone(), other.clone()))
    }

    /// `self * c` for a constant `c`.
    pub fn scale(&self, c: f64) -> Value {
        unary(self, |x| x * c, Op::Scale(self.clone(), c))
    }

    /// `self + c` for a constant `c`.
    pub fn offset(&self, c: f64) -> Value {
        unary(self, |x| x + c, Op::Offset(self.clone()))
    }

    pub fn neg(&self) -> Value {
        self.scale(-1.0)
    }

    /// `c - self`.
    pub fn rsub(&self, c: f64) -> Value {
        self.scale(-1.0).offset(c)
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Value) -> Result<Value> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Value::derived(
            vec![m, n],
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    /// 2-D convolution over `[batch, in_ch, h, w]` with weight
    /// `[out_ch, in_ch, k, k]`, optional bias `[out_ch]`, zero padding and
    /// stride 1 or 2.
    pub fn conv2d(
        &self,
        weight: &Value,
        bias: Option<&Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Value> {
        let (si, sw) = (self.shape(), weight.shape());
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-D input and weight, got {:?} and {:?}", si, sw),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape("conv2d", format!("unsupported stride {stride}")));
        }
        let (bsz, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin || kh != kw || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", si, sw),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", b.shape()),
                ));
            }
        }
        let k = kh;
        let ho = conv_out_dim(h, k, stride, padding);
        let wo = conv_out_dim(w, k, stride, padding);
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            padding,
            ho,
            wo,
        };
        let x = self.data();
        let wt = weight.data();
        let (plane, rows) = (ho * wo, cin * k * k);
        let mut out = vec![0.0; bsz * cout * plane];
        let mut col = vec![0.0; rows * plane];
        for b in 0..bsz {
            geom.im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], &mut col);
            for co in 0..cout {
                let orow = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                if let Some(bv) = bias {
                    orow.fill(bv.data()[co]);
                }
                for (r, &wv) in wt[co * rows..(co + 1) * rows].iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    for (o, &c) in orow.iter_mut().zip(&col[r * plane..(r + 1) * plane]) {
                        *o += wv * c;
                    }
                }
            }
        }
        Ok(Value::derived(
            vec![bsz, cout, ho, wo],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&self) -> Value {
        unary(self, |x| x.max(0.0), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Value {
        unary(self, sigmoid_f, Op::Sigmoid(self.clone()))
    }

    /// Natural logarithm.
    pub fn log(&self) -> Value {
        unary(
            self,
            f64::ln,
            Op::Log {
                input: self.clone(),
                floor: None,
            },
        )
    }

    /// `log(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floored(&self, floor: f64) -> Value {
        unary(
            self,
            |x| x.max(floor).ln(),
            Op::Log {
                input: self.clone(),
                floor: Some(floor),
            },
        )
    }

    pub fn abs(&self) -> Value {
        unary(self, f64::abs, Op::Abs(self.clone()))
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, exponent: f64) -> Value {
        unary(self, |x| x.powf(exponent), Op::Powf(self.clone(), exponent))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Value {
        let s = self.data().iter().sum();
        Value::derived(vec![], vec![s], Op::Sum(self.clone()))
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&self) -> Value {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.data().iter().sum();
        Value::derived(vec![], vec![s / n], Op::Mean(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Ok(Value::derived(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Value> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("invalid permutation {:?} for shape {:?}", perm, shape),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_index = permute_index(shape, perm);
        let x = self.data();
        let data = src_index.iter().map(|&i| x[i]).collect();
        Ok(Value::derived(
            out_shape,
            data,
            Op::Permute(self.clone(), perm.to_vec()),
        ))
    }

    /// Selects rows (first axis) of an array of rank >= 1.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Value> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::shape("gather_rows", "cannot gather from a scalar"));
        }
        let row_len: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {:?}", shape),
            ));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&x[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        Ok(Value::derived(
            out_shape,
            data,
            Op::GatherRows(self.clone(), rows.to_vec()),
        ))
    }

    /// Elementwise smooth-L1: `0.5 d^2 / beta` inside `|d| < beta`, else `|d| - 0.5 beta`.
    pub fn smooth_l1(&self, beta: f64) -> Value {
        unary(self, |d| smooth_l1_f(d, beta), Op::SmoothL1(self.clone(), beta))
    }
}

pub(crate) fn smooth_l1_f(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// For each flat output index of the permuted array, the flat input index.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Shape bookkeeping of one convolution.
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Patch matrix `[cin * k * k, ho * wo]` of one image; padding reads as zero.
    pub fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.cin {
            let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[r * plane..(r + 1) * plane];
                    dst.fill(0.0);
                    let (lo, hi) = valid_range(self.w, self.wo, kx, self.stride, self.padding);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let xrow = &xin[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for ox in lo..hi {
                            drow[ox] = xrow[ox * self.stride + kx - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adds a patch-matrix gradient back onto the image gradient `gx`.
    pub fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.cin {
            let gin = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let src = &col[r * plane..(r + 1) * plane];
                    let (lo, hi) = valid_range(self.w, self.wo, kx, self.stride, self.padding);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let grow = &mut gin[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in lo..hi {
                            grow[ox * self.stride + kx - self.padding] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kx - padding` is in bounds.
pub(crate) fn valid_range(
    w: usize,
    wo: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let mut lo = 0;
    while lo < wo && lo * stride + kx < padding {
        lo += 1;
    }
    let mut hi = wo;
    while hi > lo && (hi - 1) * stride + kx - padding >= w {
        hi -= 1;
    }
    (lo, hi)
}
