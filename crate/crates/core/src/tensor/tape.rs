use std::cell::{Ref, RefCell};

use super::nn::{ParamId, ParamStore};
use super::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<S>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Concat(Var, Var),
    BroadcastTime(Var),
    L2Normalize {
        x: Var,
        norms: Vec<S>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Mean(Var),
    SupCon {
        z: Var,
        /// Row-wise softmax over j ≠ i, zero on the diagonal.
        probs: Vec<f64>,
        /// Per-row positive weights 1/|P(i)|, zero for non-positives and non-anchors.
        pos_weight: Vec<f64>,
        n_anchors: usize,
        tau: f64,
    },
    Recon {
        pred: Var,
        diff: Vec<f64>,
        lambda: f64,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    bindings: RefCell<Vec<(ParamId, Var)>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`]; only leaves keep theirs.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Copy a parameter onto the tape; its gradient can later be
    /// accumulated back with [`ParamStore::accumulate`].
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).value.clone(), true);
        self.bindings.borrow_mut().push((id, v));
        v
    }

    pub(crate) fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bindings.borrow().clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `x [B×Cin×T]`, `w [Cout×Cin×K]`, `b [Cout]` → `[B×Cout×Tout]` with
    /// `Tout = (T + 2·pad − K)/stride + 1`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || bs != [ws[0]] || stride == 0 {
            return Err(dim_err("conv1d", &xs, &ws));
        }
        let (batch, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if t + 2 * pad < k {
            return Err(dim_err("conv1d", &xs, &ws));
        }
        let tout = (t + 2 * pad - k) / stride + 1;
        let ncol = batch * tout;
        let ck = cin * k;
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut cols = vec![S::zero(); ck * ncol];
            for c in 0..cin {
                for kk in 0..k {
                    let row = &mut cols[(c * k + kk) * ncol..(c * k + kk + 1) * ncol];
                    for bi in 0..batch {
                        let src = &xd[(bi * cin + c) * t..(bi * cin + c + 1) * t];
                        let dst = &mut row[bi * tout..(bi + 1) * tout];
                        for (ti, d) in dst.iter_mut().enumerate() {
                            let pos = (ti * stride + kk) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < t {
                                *d = src[pos as usize];
                            }
                        }
                    }
                }
            }
            let mut y = vec![S::zero(); cout * ncol];
            matmul(cout, ck, ncol, nodes[w.0].value.data(), false, &cols, false, &mut y, false);
            let bias = nodes[b.0].value.data();
            let mut out = vec![S::zero(); batch * cout * tout];
            for co in 0..cout {
                for bi in 0..batch {
                    let src = &y[co * ncol + bi * tout..co * ncol + (bi + 1) * tout];
                    let dst = &mut out[(bi * cout + co) * tout..(bi * cout + co + 1) * tout];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias[co];
                    }
                }
            }
            (out, cols)
        };
        let rg = self.requires(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, cout, tout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// `x [B×In]`, `w [Out×In]`, `b [Out]` → `[B×Out]`.
    pub fn dense(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(dim_err("dense", &xs, &ws));
        }
        let (batch, din, dout) = (xs[0], xs[1], ws[0]);
        let out = {
            let nodes = self.nodes.borrow();
            let mut y = vec![S::zero(); batch * dout];
            matmul(
                batch,
                din,
                dout,
                nodes[x.0].value.data(),
                false,
                nodes[w.0].value.data(),
                true,
                &mut y,
                false,
            );
            let bias = nodes[b.0].value.data();
            for row in y.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
            y
        };
        let rg = self.requires(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, dout], out)?, Op::Dense { x, w, b }, rg))
    }

    fn unary(&self, x: Var, op: Op<S>, f: impl Fn(&Tensor<S>) -> Result<Tensor<S>>) -> Result<Var> {
        let out = f(&self.value(x))?;
        let rg = self.requires(&[x]);
        Ok(self.push(out, op, rg))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |t| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect(),
            )
        })
    }

    /// Mean over the time axis: `[B×C×T]` → `[B×C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[2] == 0 {
            return Err(dim_err("global_avg_pool", &xs, &[]));
        }
        self.unary(x, Op::GlobalAvgPool(x), |t| {
            let n = xs[2];
            let data = t
                .data()
                .chunks(n)
                .map(|row| S::of(row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64))
                .collect();
            Tensor::new(vec![xs[0], xs[1]], data)
        })
    }

    /// Concatenate `[B×Ca×T]` and `[B×Cb×T]` along channels.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(dim_err("concat", &sa, &sb));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let (na, nb) = (sa[1] * sa[2], sb[1] * sb[2]);
            let mut out = Vec::with_capacity(da.len() + db.len());
            for bi in 0..sa[0] {
                out.extend_from_slice(&da[bi * na..(bi + 1) * na]);
                out.extend_from_slice(&db[bi * nb..(bi + 1) * nb]);
            }
            out
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2]], out)?,
            Op::Concat(a, b),
            rg,
        ))
    }

    /// Repeat `[B×C]` along a new time axis: `[B×C×T]`.
    pub fn broadcast_over_time(&self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(dim_err("broadcast_over_time", &xs, &[t]));
        }
        self.unary(x, Op::BroadcastTime(x), |v| {
            let mut out = Vec::with_capacity(v.len() * t);
            for &val in v.data() {
                out.extend(std::iter::repeat_n(val, t));
            }
            Tensor::new(vec![xs[0], xs[1], t], out)
        })
    }

    /// Normalize each row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs.last().ok_or_else(|| dim_err("l2_normalize", &xs, &[]))?;
        if d == 0 {
            return Err(dim_err("l2_normalize", &xs, &[]));
        }
        let (out, norms) = {
            let v = self.value(x);
            let mut out = Vec::with_capacity(v.len());
            let mut norms = Vec::new();
            for row in v.data().chunks(d) {
                let n = row.iter().map(|a| a.as_f64() * a.as_f64()).sum::<f64>().sqrt().max(1e-12);
                norms.push(S::of(n));
                out.extend(row.iter().map(|&a| S::of(a.as_f64() / n)));
            }
            (out, norms)
        };
        let rg = self.requires(&[x]);
        Ok(self.push(Tensor::new(xs, out)?, Op::L2Normalize { x, norms }, rg))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(name, &sa, &sb));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            da.iter().zip(db).map(|(&p, &q)| f(p, q)).collect()
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&self, x: Var, c: S) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())
        })
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sum(x), |t| {
            Ok(Tensor::scalar(S::of(t.data().iter().map(|v| v.as_f64()).sum())))
        })
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Mean(x), |t| {
            let n = t.len().max(1) as f64;
            Ok(Tensor::scalar(S::of(t.data().iter().map(|v| v.as_f64()).sum::<f64>() / n)))
        })
    }

    /// Supervised contrastive loss over rows of `z [B×d]`.
    ///
    /// `positives` is a row-major `B×B` mask (the diagonal is ignored).
    /// Anchors without positives are skipped and do not count toward the
    /// average. Rows are assumed unit-norm; this is not checked here.
    pub fn supcon(&self, z: Var, positives: &[bool], tau: f64) -> Result<Var> {
        let zs = self.shape(z);
        if zs.len() != 2 {
            return Err(dim_err("supcon", &zs, &[]));
        }
        let (b, d) = (zs[0], zs[1]);
        if b < 2 {
            return Err(Error::Batch(format!("contrastive batch needs at least 2 rows, got {b}")));
        }
        if positives.len() != b * b {
            return Err(dim_err("supcon", &zs, &[positives.len()]));
        }
        if !(tau > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        let zd: Vec<f64> = self.value(z).data().iter().map(|v| v.as_f64()).collect();
        let mut sim = vec![0.0f64; b * b];
        matmul(b, d, b, &zd, false, &zd, true, &mut sim, false);
        sim.iter_mut().for_each(|s| *s /= tau);

        let mut probs = vec![0.0f64; b * b];
        let mut pos_weight = vec![0.0f64; b * b];
        let mut total = 0.0f64;
        let mut n_anchors = 0usize;
        for i in 0..b {
            let row = &sim[i * b..(i + 1) * b];
            let n_pos = (0..b).filter(|&j| j != i && positives[i * b + j]).count();
            let m = (0..b).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut zsum = 0.0;
            for j in (0..b).filter(|&j| j != i) {
                let e = (row[j] - m).exp();
                probs[i * b + j] = e;
                zsum += e;
            }
            for j in 0..b {
                probs[i * b + j] /= zsum;
            }
            if n_pos == 0 {
                continue;
            }
            n_anchors += 1;
            let mut pos_sum = 0.0;
            for j in (0..b).filter(|&j| j != i && positives[i * b + j]) {
                pos_sum += row[j];
                pos_weight[i * b + j] = 1.0 / n_pos as f64;
            }
            total += (m - pos_sum / n_pos as f64) + zsum.ln();
        }
        if n_anchors == 0 {
            return Err(Error::Batch("no anchor in the batch has a positive".into()));
        }
        let loss = total / n_anchors as f64;
        let rg = self.requires(&[z]);
        Ok(self.push(
            Tensor::scalar(S::of(loss)),
            Op::SupCon {
                z,
                probs,
                pos_weight,
                n_anchors,
                tau,
            },
            rg,
        ))
    }

    /// `mean((pred − target)²) + λ·mean(|pred − target|)`; shapes must hold the
    /// same number of elements.
    pub fn recon_loss(&self, pred: Var, target: &Tensor<S>, lambda: f64) -> Result<Var> {
        let ps = self.shape(pred);
        if ps.iter().product::<usize>() != target.len() || target.is_empty() {
            return Err(dim_err("recon_loss", &ps, target.shape()));
        }
        let diff: Vec<f64> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| p.as_f64() - y.as_f64())
            .collect();
        let n = diff.len() as f64;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let mae = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
        let rg = self.requires(&[pred]);
        Ok(self.push(
            Tensor::scalar(S::of(mse + lambda * mae)),
            Op::Recon { pred, diff, lambda },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(nodes[loss.0].value.shape().to_vec(), vec![S::one()])?);
        let needs = |v: Var| nodes[v.0].requires_grad;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let xs = nodes[x.0].value.shape();
                    let ws = nodes[w.0].value.shape();
                    let (batch, cin, t) = (xs[0], xs[1], xs[2]);
                    let (cout, k) = (ws[0], ws[2]);
                    let tout = node.value.shape()[2];
                    let ncol = batch * tout;
                    let ck = cin * k;
                    let mut gy = vec![S::zero(); cout * ncol];
                    for bi in 0..batch {
                        for co in 0..cout {
                            let src = &gd[(bi * cout + co) * tout..(bi * cout + co + 1) * tout];
                            gy[co * ncol + bi * tout..co * ncol + (bi + 1) * tout].copy_from_slice(src);
                        }
                    }
                    if needs(*w) {
                        let mut gw = vec![S::zero(); cout * ck];
                        matmul(cout, ncol, ck, &gy, false, cols, true, &mut gw, false);
                        accumulate(&mut grads, *w, Tensor::new(ws.to_vec(), gw)?);
                    }
                    if needs(*b) {
                        let gb = gy
                            .chunks(ncol)
                            .map(|row| S::of(row.iter().map(|v| v.as_f64()).sum()))
                            .collect();
                        accumulate(&mut grads, *b, Tensor::new(vec![cout], gb)?);
                    }
                    if needs(*x) {
                        let mut gcols = vec![S::zero(); ck * ncol];
                        matmul(ck, cout, ncol, nodes[w.0].value.data(), true, &gy, false, &mut gcols, false);
                        let mut gx = vec![S::zero(); batch * cin * t];
                        for c in 0..cin {
                            for kk in 0..k {
                                let row = &gcols[(c * k + kk) * ncol..(c * k + kk + 1) * ncol];
                                for bi in 0..batch {
                                    let dst = &mut gx[(bi * cin + c) * t..(bi * cin + c + 1) * t];
                                    for ti in 0..tout {
                                        let pos = (ti * stride + kk) as isize - *pad as isize;
                                        if pos >= 0 && (pos as usize) < t {
                                            dst[pos as usize] += row[bi * tout + ti];
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(xs.to_vec(), gx)?);
                    }
                }
                Op::Dense { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let ws = nodes[w.0].value.shape();
                    let (batch, din, dout) = (xs[0], xs[1], ws[0]);
                    if needs(*w) {
                        let mut gw = vec![S::zero(); dout * din];
                        matmul(dout, batch, din, gd, true, nodes[x.0].value.data(), false, &mut gw, false);
                        accumulate(&mut grads, *w, Tensor::new(ws.to_vec(), gw)?);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0f64; dout];
                        for row in gd.chunks(dout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v.as_f64();
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(vec![dout], gb.into_iter().map(S::of).collect())?);
                    }
                    if needs(*x) {
                        let mut gx = vec![S::zero(); batch * din];
                        matmul(batch, dout, din, gd, false, nodes[w.0].value.data(), false, &mut gx, false);
                        accumulate(&mut grads, *x, Tensor::new(xs.to_vec(), gx)?);
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx = gd
                        .iter()
                        .zip(xv)
                        .map(|(&gg, &v)| if v > S::zero() { gg } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(nodes[x.0].value.shape().to_vec(), gx)?);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = nodes[x.0].value.shape();
                    let inv = S::of(1.0 / xs[2] as f64);
                    let mut gx = Vec::with_capacity(xs.iter().product());
                    for &gg in gd {
                        gx.extend(std::iter::repeat_n(gg * inv, xs[2]));
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs.to_vec(), gx)?);
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (na, nb) = (sa[1] * sa[2], sb[1] * sb[2]);
                    let mut ga = Vec::with_capacity(sa[0] * na);
                    let mut gb = Vec::with_capacity(sb[0] * nb);
                    for chunk in gd.chunks(na + nb) {
                        ga.extend_from_slice(&chunk[..na]);
                        gb.extend_from_slice(&chunk[na..]);
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, Tensor::new(sa.to_vec(), ga)?);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, Tensor::new(sb.to_vec(), gb)?);
                    }
                }
                Op::BroadcastTime(x) => {
                    let t = node.value.shape()[2];
                    let gx = gd
                        .chunks(t)
                        .map(|row| S::of(row.iter().map(|v| v.as_f64()).sum()))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(nodes[x.0].value.shape().to_vec(), gx)?);
                }
                Op::L2Normalize { x, norms } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().expect("non-empty shape");
                    let mut gx = Vec::with_capacity(y.len());
                    for ((yr, gr), &n) in y.chunks(d).zip(gd.chunks(d)).zip(norms) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        let n = n.as_f64();
                        gx.extend(
                            yr.iter()
                                .zip(gr)
                                .map(|(&yy, &gg)| S::of((gg.as_f64() - yy.as_f64() * dot) / n)),
                        );
                    }
                    accumulate(&mut grads, *x, Tensor::new(nodes[x.0].value.shape().to_vec(), gx)?);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        let gb = if neg {
                            Tensor::new(g.shape().to_vec(), gd.iter().map(|&v| -v).collect())?
                        } else {
                            g.clone()
                        };
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if needs(*a) {
                        let ga = gd.iter().zip(db).map(|(&gg, &q)| gg * q).collect();
                        accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
                    }
                    if needs(*b) {
                        let gb = gd.iter().zip(da).map(|(&gg, &p)| gg * p).collect();
                        accumulate(&mut grads, *b, Tensor::new(g.shape().to_vec(), gb)?);
                    }
                }
                Op::Scale(x, c) => {
                    let gx = gd.iter().map(|&v| v * *c).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                }
                Op::Sum(x) | Op::Mean(x) => {
                    let xs = nodes[x.0].value.shape();
                    let n: usize = xs.iter().product();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / n.max(1) as f64
                    } else {
                        1.0
                    };
                    let v = S::of(gd[0].as_f64() * scale);
                    accumulate(&mut grads, *x, Tensor::new(xs.to_vec(), vec![v; n])?);
                }
                Op::SupCon {
                    z,
                    probs,
                    pos_weight,
                    n_anchors,
                    tau,
                } => {
                    let zs = nodes[z.0].value.shape();
                    let (b, d) = (zs[0], zs[1]);
                    let upstream = gd[0].as_f64();
                    let scale = upstream / (*n_anchors as f64 * tau);
                    // dL/ds_ij, zero for rows without positives
                    let mut gs = vec![0.0f64; b * b];
                    for i in 0..b {
                        if pos_weight[i * b..(i + 1) * b].iter().all(|&w| w == 0.0) {
                            continue;
                        }
                        for j in 0..b {
                            gs[i * b + j] = probs[i * b + j] - pos_weight[i * b + j];
                        }
                    }
                    let mut sym = vec![0.0f64; b * b];
                    for i in 0..b {
                        for j in 0..b {
                            sym[i * b + j] = (gs[i * b + j] + gs[j * b + i]) * scale;
                        }
                    }
                    let zd: Vec<f64> = nodes[z.0].value.data().iter().map(|v| v.as_f64()).collect();
                    let mut gz = vec![0.0f64; b * d];
                    matmul(b, b, d, &sym, false, &zd, false, &mut gz, false);
                    accumulate(&mut grads, *z, Tensor::new(zs.to_vec(), gz.into_iter().map(S::of).collect())?);
                }
                Op::Recon { pred, diff, lambda } => {
                    let n = diff.len() as f64;
                    let upstream = gd[0].as_f64();
                    let gp = diff
                        .iter()
                        .map(|&dd| {
                            let sign = if dd > 0.0 {
                                1.0
                            } else if dd < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            S::of(upstream * (2.0 * dd + lambda * sign) / n)
                        })
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::new(nodes[pred.0].value.shape().to_vec(), gp)?);
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Central finite differences of a scalar function.
pub fn numeric_gradient(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
