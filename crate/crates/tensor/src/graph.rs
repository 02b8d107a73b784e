use std::sync::Arc;

use crate::gemm::gemm;
use crate::{ParamId, ParamStore, Tensor};

type Backward = Box<dyn Fn(&[f32], &[Node]) -> Vec<Vec<f32>>>;

pub(crate) struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

static EMPTY_STORE: ParamStore = ParamStore::new();

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = (max_norm / norm) as f32;
            for g in self.grads.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// A forward-pass tape.
///
/// Parameters are read from the borrowed [`ParamStore`]; inputs are
/// constants. A graph built with [`Graph::inference`] records values only
/// and cannot be differentiated.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    track: bool,
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }


    /// Calls `f(col_start, x_start, len)` for every contiguous run of valid
    /// taps along an output row.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p_out = self.ho * self.wo;
        let pad = self.pad as isize;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dx = kx as isize - pad;
                    let ox0 = (-dx).max(0) as usize;
                    let ox1 = ((self.w as isize - dx).min(self.wo as isize)).max(0) as usize;
                    if ox1 <= ox0 {
                        continue;
                    }
                    let xbase = ci * self.h * self.w;
                    let cbase = row * p_out;
                    for oy in 0..self.ho {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ix0 = (ox0 as isize + dx) as usize;
                        f(cbase + oy * self.wo + ox0, xbase + iy as usize * self.w + ix0, ox1 - ox0);
                    }
                }
            }
        }
    }

    /// One sample's `(Cin*K*K, Ho*Wo)` patch matrix. Padding taps keep
    /// the zeros `col` was created with, since the run layout is fixed.
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        self.for_each_run(|c, i, n| col[c..c + n].copy_from_slice(&x[i..i + n]));
    }

    fn col2im(&self, col: &[f32], x: &mut [f32]) {
        self.for_each_run(|c, i, n| {
            for (d, s) in x[i..i + n].iter_mut().zip(&col[c..c + n]) {
                *d += s;
            }
        });
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            track: true,
        }
    }

    /// Value-only graph; parameters are read but no backward closures are
    /// stored.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            track: false,
        }
    }

    /// Graph without parameters.
    pub fn detached() -> Graph<'static> {
        Graph::new(&EMPTY_STORE)
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: Backward) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: (self.track && requires_grad).then_some(backward),
            param: None,
            requires_grad: self.track && requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param,
            requires_grad: self.track && param.is_some(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, None)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        self.leaf(value, Some(id))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(pid) = node.param {
                match &mut out.grads[pid.0] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            let Some(bw) = &node.backward else { continue };
            let parent_grads = bw(&g, &self.nodes);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => add_into(acc, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        out
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        self.push(value, &[x], Box::new(|g, _| vec![g.to_vec()]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(&shape, data).unwrap();
        self.push(value, &[a, b], Box::new(|g, _| vec![g.to_vec(), g.to_vec()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(&shape, data).unwrap();
        self.push(
            value,
            &[a, b],
            Box::new(|g, _| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(&shape, data).unwrap();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, n| {
                let av = n[ia].value.data();
                let bv = n[ib].value.data();
                vec![
                    g.iter().zip(bv).map(|(g, b)| g * b).collect(),
                    g.iter().zip(av).map(|(g, a)| g * a).collect(),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v * s).collect();
        let value = Tensor::new(&shape, data).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _| vec![g.iter().map(|v| v * s).collect()]),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(&shape, data).unwrap();
        let ix = x.0;
        self.push(
            value,
            &[x],
            Box::new(move |g, n| {
                let xv = n[ix].value.data();
                vec![g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect()]
            }),
        )
    }

    fn channel_dims(&self, x: Var, what: &str) -> (usize, usize, usize) {
        let s = self.shape(x);
        assert!(s.len() >= 2, "{what}: need at least (batch, channels)");
        (s[0], s[1], s[2..].iter().product())
    }

    /// `x[b, c, ...] + bias[c]`.
    pub fn add_channels(&mut self, x: Var, bias: Var) -> Var {
        let (bn, c, rest) = self.channel_dims(x, "add_channels");
        assert_eq!(self.value(bias).numel(), c, "add_channels: bias size");
        let mut value = self.value(x).clone();
        let bv = self.data(bias).to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv[(i / rest) % c];
        }
        self.push(
            value,
            &[x, bias],
            Box::new(move |g, _| {
                let mut gb = vec![0.0; c];
                for b in 0..bn {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        let off = (b * c + ch) * rest;
                        *acc += g[off..off + rest].iter().sum::<f32>();
                    }
                }
                vec![g.to_vec(), gb]
            }),
        )
    }

    /// `x[b, c, ...] * scale[c]`.
    pub fn mul_channels(&mut self, x: Var, scale: Var) -> Var {
        let (bn, c, rest) = self.channel_dims(x, "mul_channels");
        assert_eq!(self.value(scale).numel(), c, "mul_channels: scale size");
        let mut value = self.value(x).clone();
        let sv = self.data(scale).to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= sv[(i / rest) % c];
        }
        let (ix, is) = (x.0, scale.0);
        self.push(
            value,
            &[x, scale],
            Box::new(move |g, n| {
                let xv = n[ix].value.data();
                let sv = n[is].value.data();
                let mut gx = vec![0.0; g.len()];
                let mut gs = vec![0.0; c];
                for b in 0..bn {
                    for ch in 0..c {
                        let off = (b * c + ch) * rest;
                        for i in off..off + rest {
                            gx[i] = g[i] * sv[ch];
                            gs[ch] += g[i] * xv[i];
                        }
                    }
                }
                vec![gx, gs]
            }),
        )
    }

    /// `x[b, c, ...] + e[b, c]`, broadcasting `e` over trailing dims.
    pub fn add_broadcast(&mut self, x: Var, e: Var) -> Var {
        let (bn, c, rest) = self.channel_dims(x, "add_broadcast");
        assert_eq!(self.shape(e), [bn, c], "add_broadcast: embedding shape");
        let mut value = self.value(x).clone();
        let ev = self.data(e).to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += ev[i / rest];
        }
        self.push(
            value,
            &[x, e],
            Box::new(move |g, _| {
                let ge = (0..bn * c)
                    .map(|j| g[j * rest..(j + 1) * rest].iter().sum())
                    .collect();
                vec![g.to_vec(), ge]
            }),
        )
    }

    /// `x @ w^T + b` for `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 2, "linear: input must be 2-D");
        assert_eq!(ws.len(), 2, "linear: weight must be 2-D");
        assert_eq!(xs[1], ws[1], "linear: inner dims");
        let (bn, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; bn * dout];
        gemm(bn, din, dout, self.data(x), false, self.data(w), true, &mut out, 0.0);
        if let Some(b) = b {
            assert_eq!(self.value(b).numel(), dout, "linear: bias size");
            let bv = self.data(b);
            for row in out.chunks_mut(dout) {
                add_into(row, bv);
            }
        }
        let value = Tensor::new(&[bn, dout], out).unwrap();
        let (ix, iw) = (x.0, w.0);
        let has_bias = b.is_some();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            value,
            &parents,
            Box::new(move |g, n| {
                let xv = n[ix].value.data();
                let wv = n[iw].value.data();
                let mut gx = vec![0.0; bn * din];
                gemm(bn, dout, din, g, false, wv, false, &mut gx, 0.0);
                let mut gw = vec![0.0; dout * din];
                gemm(dout, bn, din, g, true, xv, false, &mut gw, 0.0);
                let mut res = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        add_into(&mut gb, row);
                    }
                    res.push(gb);
                }
                res
            }),
        )
    }

    /// Batched matmul `op(a) @ op(b)` for `(G, ., .)` operands.
    pub fn bmm(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert!(as_.len() == 3 && bs.len() == 3, "bmm: operands must be 3-D");
        assert_eq!(as_[0], bs[0], "bmm: batch dims");
        let gn = as_[0];
        let (m, k) = if trans_a { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (k2, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        assert_eq!(k, k2, "bmm: inner dims");
        let mut out = vec![0.0; gn * m * n];
        let (av, bv) = (self.data(a), self.data(b));
        for i in 0..gn {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                trans_a,
                &bv[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let value = Tensor::new(&[gn, m, n], out).unwrap();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, nodes| {
                let av = nodes[ia].value.data();
                let bv = nodes[ib].value.data();
                let mut ga = vec![0.0; gn * m * k];
                let mut gb = vec![0.0; gn * k * n];
                for i in 0..gn {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..];
                    let bi = &bv[i * k * n..];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    if trans_a {
                        // dA (k x m) = op(B) @ dC^T
                        gemm(k, n, m, bi, trans_b, gi, true, ga_i, 0.0);
                    } else {
                        // dA (m x k) = dC @ op(B)^T
                        gemm(m, n, k, gi, false, bi, !trans_b, ga_i, 0.0);
                    }
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // dB (n x k) = dC^T @ op(A)
                        gemm(n, m, k, gi, true, ai, trans_a, gb_i, 0.0);
                    } else {
                        // dB (k x n) = op(A)^T @ dC
                        gemm(k, m, n, ai, !trans_a, gi, false, gb_i, 0.0);
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    /// Stride-1 2-D convolution (cross-correlation) with square kernels and
    /// symmetric zero padding. `x: (B, Cin, H, W)`, `w: (Cout, Cin, K, K)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be (B, C, H, W)");
        assert_eq!(ws.len(), 4, "conv2d: weight must be (Cout, Cin, K, K)");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let (k, cout) = (ws[2], ws[0]);
        assert!(xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k, "conv2d: kernel too large");
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            pad,
            ho: xs[2] + 2 * pad + 1 - k,
            wo: xs[3] + 2 * pad + 1 - k,
        };
        let p_out = geom.ho * geom.wo;
        let in_len = geom.cin * geom.h * geom.w;
        let rows = geom.rows();
        let xv = self.data(x);
        let wv = self.data(w);
        let mut out = vec![0.0; geom.batch * cout * p_out];
        let mut col = vec![0.0; rows * p_out];
        for b in 0..geom.batch {
            geom.im2col(&xv[b * in_len..][..in_len], &mut col);
            gemm(cout, rows, p_out, wv, false, &col, false, &mut out[b * cout * p_out..][..cout * p_out], 0.0);
        }
        if let Some(bias) = bias {
            assert_eq!(self.value(bias).numel(), cout, "conv2d: bias size");
            let bv = self.data(bias);
            for (i, plane) in out.chunks_mut(p_out).enumerate() {
                let bval = bv[i % cout];
                for v in plane {
                    *v += bval;
                }
            }
        }
        let value = Tensor::new(&[geom.batch, cout, geom.ho, geom.wo], out).unwrap();
        let (ix, iw) = (x.0, w.0);
        let has_bias = bias.is_some();
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            value,
            &parents,
            Box::new(move |g, n| {
                let xv = n[ix].value.data();
                let wv = n[iw].value.data();
                let mut col = vec![0.0; rows * p_out];
                let mut gcol = vec![0.0; rows * p_out];
                let mut gw = vec![0.0; cout * rows];
                let mut gx = vec![0.0; geom.batch * in_len];
                for b in 0..geom.batch {
                    let gb = &g[b * cout * p_out..][..cout * p_out];
                    geom.im2col(&xv[b * in_len..][..in_len], &mut col);
                    gemm(cout, p_out, rows, gb, false, &col, true, &mut gw, 1.0);
                    gemm(rows, cout, p_out, wv, true, gb, false, &mut gcol, 0.0);
                    geom.col2im(&gcol, &mut gx[b * in_len..][..in_len]);
                }
                let mut res = vec![gx, gw];
                if has_bias {
                    let mut gbias = vec![0.0; cout];
                    for (i, plane) in g.chunks(p_out).enumerate() {
                        gbias[i % cout] += plane.iter().sum::<f32>();
                    }
                    res.push(gbias);
                }
                res
            }),
        )
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "avg_pool2: input must be (B, C, H, W)");
        assert!(s[2].is_multiple_of(2) && s[3].is_multiple_of(2), "avg_pool2: odd spatial size");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.data(x);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = p * h * w;
                    let v = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[p * ho * wo + y * wo + xx] = 0.25 * v;
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], ho, wo], out).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[p * h * w + y * w + xx] = 0.25 * g[p * ho * wo + (y / 2) * wo + xx / 2];
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2: input must be (B, C, H, W)");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.data(x);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], ho, wo], out).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[p * h * w + (y / 2) * w + xx / 2] += g[p * ho * wo + y * wo + xx];
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Concatenates along dim 1. All inputs share dim 0 and trailing dims.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat: no inputs");
        let first = self.shape(xs[0]).to_vec();
        assert!(first.len() >= 2, "concat: need (batch, channels, ...)");
        let bn = first[0];
        let rest: usize = first[2..].iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s[0], bn, "concat: batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat: trailing dims mismatch");
            widths.push(s[1] * rest);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; bn * total];
        let mut off = 0;
        for (&x, &wd) in xs.iter().zip(&widths) {
            let xv = self.data(x);
            for b in 0..bn {
                out[b * total + off..][..wd].copy_from_slice(&xv[b * wd..][..wd]);
            }
            off += wd;
        }
        let mut shape = first.clone();
        shape[1] = total / rest.max(1);
        let value = Tensor::new(&shape, out).unwrap();
        self.push(
            value,
            xs,
            Box::new(move |g, _| {
                let mut res = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &wd in &widths {
                    let mut gx = vec![0.0; bn * wd];
                    for b in 0..bn {
                        gx[b * wd..][..wd].copy_from_slice(&g[b * total + off..][..wd]);
                    }
                    res.push(gx);
                    off += wd;
                }
                res
            }),
        )
    }

    /// `out[i] = x[index[i]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(index.len(), n, "gather: index length vs shape");
        let xv = self.data(x);
        let src_len = xv.len();
        let out: Vec<f32> = index.iter().map(|&i| xv[i as usize]).collect();
        let value = Tensor::new(shape, out).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; src_len];
                for (gi, &i) in g.iter().zip(index.iter()) {
                    gx[i as usize] += gi;
                }
                vec![gx]
            }),
        )
    }

    /// Normalizes each `(batch, group)` slice of `(B, C, ...)` to zero mean
    /// and unit variance. No affine part.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f32) -> Var {
        let (bn, c, rest) = self.channel_dims(x, "group_norm");
        assert!(groups > 0 && c % groups == 0, "group_norm: groups must divide channels");
        let span = c / groups * rest;
        let xv = self.data(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; bn * groups];
        for s in 0..bn * groups {
            let seg = &xv[s * span..(s + 1) * span];
            let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[s] = is as f32;
            for (o, &v) in xhat[s * span..(s + 1) * span].iter_mut().zip(seg) {
                *o = ((v as f64 - mean) * is) as f32;
            }
        }
        let shape = self.shape(x).to_vec();
        let value = Tensor::new(&shape, xhat.clone()).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (s, &is) in inv_std.iter().enumerate().take(bn * groups) {
                    let r = s * span..(s + 1) * span;
                    let gs = &g[r.clone()];
                    let xh = &xhat[r.clone()];
                    let mg = gs.iter().sum::<f32>() / span as f32;
                    let mgx = gs.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / span as f32;
                    for ((o, &gv), &xv) in gx[r].iter_mut().zip(gs).zip(xh) {
                        *o = is * (gv - mg - xv * mgx);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax: scalar input");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(&shape, out).unwrap();
        let me = self.nodes.len();
        self.push(
            value,
            &[x],
            Box::new(move |g, n| {
                let y = n[me].value.data();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), o) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![gx]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: f32 = self.data(x).iter().sum();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse: shape mismatch");
        let n = self.value(a).numel();
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        let (ia, ib) = (a.0, b.0);
        self.push(
            Tensor::scalar((s / n as f64) as f32),
            &[a, b],
            Box::new(move |g, nodes| {
                let av = nodes[ia].value.data();
                let bv = nodes[ib].value.data();
                let k = 2.0 * g[0] / n as f32;
                let ga: Vec<f32> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![ga, gb]
            }),
        )
    }
}
