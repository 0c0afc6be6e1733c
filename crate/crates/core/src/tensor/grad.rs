use std::collections::{HashMap, HashSet};

use super::ops::{broadcast_shape, conv_out_dim, permute_index, BroadcastMap, ConvGeom};
use super::{Op, Value};
use crate::error::{Error, Result};

/// Gradients of one backward pass, keyed by value id.
#[derive(Debug, Default, Clone)]
pub struct GradStore {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    /// Gradient of the root with respect to `v`, if `v` was reachable and tracked.
    pub fn get(&self, v: &Value) -> Option<&[f64]> {
        self.grads.get(&v.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, v: &Value, g: Vec<f64>) {
        if !v.requires_grad() {
            return;
        }
        match self.grads.get_mut(&v.id()) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(v.id(), g);
            }
        }
    }
}

/// Reverse-mode pass from a scalar `root`. Returns a fresh gradient store.
pub fn backward(root: &Value) -> Result<GradStore> {
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let mut store = GradStore::default();
    if !root.requires_grad() {
        return Ok(store);
    }
    let order = topo_order(root);
    store.grads.insert(root.id(), vec![1.0]);
    for v in order.iter().rev() {
        let Some(g) = store.grads.get(&v.id()).cloned() else {
            continue;
        };
        propagate(v, &g, &mut store);
    }
    Ok(store)
}

/// Post-order over tracked nodes, iterative so deep graphs do not overflow the stack.
fn topo_order(root: &Value) -> Vec<Value> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Value, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for child in v.op().operands().into_iter().rev() {
            if child.requires_grad() && !visited.contains(&child.id()) {
                stack.push((child.clone(), false));
            }
        }
    }
    order
}

fn reduce_broadcast(src: &Value, out_shape: &[usize], g: &[f64], f: impl Fn(usize) -> f64) -> Vec<f64> {
    let map = BroadcastMap::new(src.shape(), out_shape);
    let mut acc = vec![0.0; src.numel()];
    for (i, &gi) in g.iter().enumerate() {
        acc[map.get(i)] += gi * f(i);
    }
    acc
}

fn propagate(v: &Value, g: &[f64], store: &mut GradStore) {
    let out = v.data();
    match v.op() {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let shape = broadcast_shape(a.shape(), b.shape()).expect("checked in forward");
            let sign = if matches!(v.op(), Op::Sub(..)) { -1.0 } else { 1.0 };
            if a.requires_grad() {
                store.accumulate(a, reduce_broadcast(a, &shape, g, |_| 1.0));
            }
            if b.requires_grad() {
                store.accumulate(b, reduce_broadcast(b, &shape, g, |_| sign));
            }
        }
        Op::Mul(a, b) => {
            let shape = broadcast_shape(a.shape(), b.shape()).expect("checked in forward");
            let ma = BroadcastMap::new(a.shape(), &shape);
            let mb = BroadcastMap::new(b.shape(), &shape);
            if a.requires_grad() {
                let bd = b.data();
                store.accumulate(a, reduce_broadcast(a, &shape, g, |i| bd[mb.get(i)]));
            }
            if b.requires_grad() {
                let ad = a.data();
                store.accumulate(b, reduce_broadcast(b, &shape, g, |i| ad[ma.get(i)]));
            }
        }
        Op::Scale(a, c) => store.accumulate(a, g.iter().map(|x| x * c).collect()),
        Op::Offset(a) | Op::Reshape(a) => store.accumulate(a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = G B^T
                let bd = b.data();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                store.accumulate(a, ga);
            }
            if b.requires_grad() {
                // dB = A^T G
                let ad = a.data();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                store.accumulate(b, gb);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => conv_backward(input, weight, bias.as_ref(), *stride, *padding, g, store),
        Op::Relu(a) => {
            let ad = a.data();
            store.accumulate(
                a,
                g.iter().zip(ad).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect(),
            );
        }
        Op::Sigmoid(a) => store.accumulate(
            a,
            g.iter().zip(out).map(|(gi, &s)| gi * s * (1.0 - s)).collect(),
        ),
        Op::Log { input, floor } => {
            let ad = input.data();
            let lo = floor.unwrap_or(f64::NEG_INFINITY);
            store.accumulate(
                input,
                g.iter()
                    .zip(ad)
                    .map(|(gi, &x)| if x < lo { 0.0 } else { gi / x })
                    .collect(),
            );
        }
        Op::Abs(a) => {
            let ad = a.data();
            store.accumulate(a, g.iter().zip(ad).map(|(gi, &x)| gi * x.signum() * (x != 0.0) as u8 as f64).collect());
        }
        Op::Powf(a, e) => {
            let ad = a.data();
            let e = *e;
            store.accumulate(
                a,
                g.iter()
                    .zip(ad)
                    .map(|(gi, &x)| if e == 0.0 { 0.0 } else { gi * e * x.powf(e - 1.0) })
                    .collect(),
            );
        }
        Op::Sum(a) => store.accumulate(a, vec![g[0]; a.numel()]),
        Op::Mean(a) => {
            let n = a.numel().max(1) as f64;
            store.accumulate(a, vec![g[0] / n; a.numel()]);
        }
        Op::Permute(a, perm) => {
            let src = permute_index(a.shape(), perm);
            let mut ga = vec![0.0; a.numel()];
            for (o, &i) in src.iter().enumerate() {
                ga[i] = g[o];
            }
            store.accumulate(a, ga);
        }
        Op::GatherRows(a, rows) => {
            let row_len: usize = a.shape()[1..].iter().product();
            let mut ga = vec![0.0; a.numel()];
            for (k, &r) in rows.iter().enumerate() {
                for c in 0..row_len {
                    ga[r * row_len + c] += g[k * row_len + c];
                }
            }
            store.accumulate(a, ga);
        }
        Op::SmoothL1(a, beta) => {
            let ad = a.data();
            let beta = *beta;
            store.accumulate(
                a,
                g.iter()
                    .zip(ad)
                    .map(|(gi, &d)| {
                        if d.abs() < beta {
                            gi * d / beta
                        } else {
                            gi * d.signum()
                        }
                    })
                    .collect(),
            );
        }
    }
}

fn conv_backward(
    input: &Value,
    weight: &Value,
    bias: Option<&Value>,
    stride: usize,
    padding: usize,
    g: &[f64],
    store: &mut GradStore,
) {
    let si = input.shape();
    let sw = weight.shape();
    let (bsz, cin, h, w) = (si[0], si[1], si[2], si[3]);
    let (cout, k) = (sw[0], sw[2]);
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
    let x = input.data();
    let wt = weight.data();
    let need_x = input.requires_grad();
    let need_w = weight.requires_grad();
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
    let (plane, rows) = (ho * wo, cin * k * k);
    let mut col = vec![0.0; rows * plane];
    let mut gcol = vec![0.0; if need_x { rows * plane } else { 0 }];
    for b in 0..bsz {
        let gimg = &g[b * cout * plane..(b + 1) * cout * plane];
        if need_w {
            geom.im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], &mut col);
            for co in 0..cout {
                let grow = &gimg[co * plane..(co + 1) * plane];
                for (r, gwv) in gw[co * rows..(co + 1) * rows].iter_mut().enumerate() {
                    *gwv += dot(grow, &col[r * plane..(r + 1) * plane]);
                }
            }
        }
        if need_x {
            gcol.fill(0.0);
            for co in 0..cout {
                let grow = &gimg[co * plane..(co + 1) * plane];
                for (r, &wv) in wt[co * rows..(co + 1) * rows].iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    for (c, &gv) in gcol[r * plane..(r + 1) * plane].iter_mut().zip(grow) {
                        *c += wv * gv;
                    }
                }
            }
            geom.col2im(&gcol, &mut gx[b * cin * h * w..(b + 1) * cin * h * w]);
        }
    }
    if need_x {
        store.accumulate(input, gx);
    }
    if need_w {
        store.accumulate(weight, gw);
    }
    if let Some(bv) = bias {
        if bv.requires_grad() {
            let mut gb = vec![0.0; cout];
            for b in 0..bsz {
                for (co, gbv) in gb.iter_mut().enumerate() {
                    *gbv += g[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo]
                        .iter()
                        .sum::<f64>();
                }
            }
            store.accumulate(bv, gb);
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_root_gives_unit_grads() {
        let x = Value::param(&[5], vec![1., -2., 3., 0.5, 7.]).unwrap();
        let grads = backward(&x.sum()).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn mean_of_squares() {
        let x = Value::param(&[3], vec![1., 2., 3.]).unwrap();
        let root = x.powf(2.0).mean();
        let grads = backward(&root).unwrap();
        let g = grads.get(&x).unwrap();
        for (got, want) in g.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Value::param(&[], vec![0.0]).unwrap();
        let grads = backward(&x.sigmoid()).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Value::param(&[2], vec![1., 2.]).unwrap();
        assert!(matches!(backward(&x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let x = Value::param(&[2], vec![1., 2.]).unwrap();
        let root = x.powf(2.0).sum();
        let g1 = backward(&root).unwrap().get(&x).unwrap().to_vec();
        let g2 = backward(&root).unwrap().get(&x).unwrap().to_vec();
        assert_eq!(g1, g2);
        assert_eq!(g1, vec![2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_multiplier_is_constant() {
        let x = Value::param(&[3], vec![1.5, -2.0, 4.0]).unwrap();
        let c = x.stop_gradient();
        let root = c.mul(&x).unwrap().sum();
        let grads = backward(&root).unwrap();
        assert_eq!(grads.get(&x).unwrap(), x.data());
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn shared_operand_accumulates_within_one_graph() {
        let x = Value::param(&[1], vec![3.0]).unwrap();
        let root = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let grads = backward(&root).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[7.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = Value::param(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Value::param(&[3], vec![0.0; 3]).unwrap();
        let root = a.add(&b).unwrap().sum();
        let grads = backward(&root).unwrap();
        assert_eq!(grads.get(&b).unwrap(), &[2.0, 2.0, 2.0]);
    }
}
