use alloc::vec;
use alloc::vec::Vec;

use super::tape::{conv2d_for_each, dot, focal_grad, matmul_raw, transpose_raw, Broadcast, Op, Tape, Var};
use crate::error::{Error, Result};

/// Accumulates input gradients for one node; applies the injected fault
/// scaling, if any, as contributions are added.
struct Sink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    rg: &'a [bool],
    sizes: &'a [usize],
    factor: f64,
}

impl Sink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.rg[v.0]
    }

    fn slot(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.sizes[v.0];
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// `grad[v][i] += factor * f(i)` for all `i`.
    fn add_with(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        let factor = self.factor;
        let g = self.slot(v);
        for (i, x) in g.iter_mut().enumerate() {
            *x += factor * f(i);
        }
    }

    fn add_vec(&mut self, v: Var, contrib: &[f64]) {
        if !self.wants(v) {
            return;
        }
        let factor = self.factor;
        let g = self.slot(v);
        for (x, &c) in g.iter_mut().zip(contrib) {
            *x += factor * c;
        }
    }

    /// Reduce an upstream-shaped contribution onto a broadcast operand.
    fn add_broadcast(&mut self, v: Var, bc: Broadcast, contrib: &[f64]) {
        match bc {
            Broadcast::Same => self.add_vec(v, contrib),
            Broadcast::Scalar => {
                let s: f64 = contrib.iter().sum();
                self.add_with(v, |_| s);
            }
            Broadcast::Row => {
                let n = self.sizes[v.0];
                let mut acc = vec![0.0; n];
                for (i, &c) in contrib.iter().enumerate() {
                    acc[i % n] += c;
                }
                self.add_vec(v, &acc);
            }
        }
    }
}

fn bc_index(bc: Broadcast, i: usize, n: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % n,
    }
}

impl Tape {
    /// Reverse sweep from a scalar root. Afterwards [`Tape::grad`] returns
    /// `d root / d v` for every requires-grad leaf reachable from `root`.
    /// Intermediate gradients are released once consumed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Reverse sweep from several outputs with given upstream gradients.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (v, g) in seeds {
            if g.len() != self.value(*v).numel() {
                return Err(Error::shape("backward", &[self.shape(*v), &[g.len()]], "seed length differs"));
            }
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
        let rg: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let fault = self.fault;
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for idx in (0..=top.min(n.saturating_sub(1))).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let factor = match fault {
                Some((kind, f)) if kind == node.op.kind() => f,
                _ => 1.0,
            };
            let mut sink = Sink { grads: &mut grads, rg: &rg, sizes: &sizes, factor };
            self.node_backward(idx, &g, &mut sink);
        }
        // Keep leaf gradients only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn node_backward(&self, idx: usize, g: &[f64], sink: &mut Sink<'_>) {
        let out = self.nodes[idx].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                sink.add_vec(*a, g);
                if sink.wants(*b) {
                    sink.add_broadcast(*b, *bc, g);
                }
            }
            Op::Sub(a, b, bc) => {
                sink.add_vec(*a, g);
                if sink.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    sink.add_broadcast(*b, *bc, &neg);
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let nb = bv.len();
                if sink.wants(*a) {
                    sink.add_with(*a, |i| g[i] * bv[bc_index(*bc, i, nb)]);
                }
                if sink.wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    sink.add_broadcast(*b, *bc, &prod);
                }
            }
            Op::Scale(a, c) => sink.add_with(*a, |i| g[i] * c),
            Op::AddScalar(a) => sink.add_vec(*a, g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.dims(*a), self.dims(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if sink.wants(*a) {
                    let bt = transpose_raw(self.val(*b), 1, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    sink.add_vec(*a, &da);
                }
                if sink.wants(*b) {
                    let at = transpose_raw(self.val(*a), 1, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    sink.add_vec(*b, &db);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = self.dims(Var(idx));
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.dims(v)[*axis] * inner;
                    if sink.wants(v) {
                        let mut part = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            part.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        sink.add_vec(v, &part);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                if sink.wants(*input) {
                    let s = self.dims(*input);
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let ext = s[*axis];
                    let len = self.dims(Var(idx))[*axis];
                    let mut full = vec![0.0; self.nodes[input.0].value.numel()];
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        full[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    sink.add_vec(*input, &full);
                }
            }
            Op::Reshape(a) => sink.add_vec(*a, g),
            Op::Transpose(a) => {
                let s = self.dims(*a);
                let (b, r, c) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                let back = transpose_raw(g, b, c, r);
                sink.add_vec(*a, &back);
            }
            Op::Sum(a) => sink.add_with(*a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                sink.add_with(*a, |_| g[0] / n);
            }
            Op::MeanRows(a) => {
                let s = self.dims(*a);
                let (n, c) = (s[0], s[1]);
                let inv = 1.0 / n as f64;
                sink.add_with(*a, |i| g[i % c] * inv);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.dims(*a);
                let hw = s[1] * s[2];
                let inv = 1.0 / hw as f64;
                sink.add_with(*a, |i| g[i / hw] * inv);
            }
            Op::Max { input, argmax } => {
                if sink.wants(*input) {
                    let mut full = vec![0.0; self.nodes[input.0].value.numel()];
                    for (j, &src) in argmax.iter().enumerate() {
                        full[src] += g[j];
                    }
                    sink.add_vec(*input, &full);
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                sink.add_with(*a, |i| if x[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => sink.add_with(*a, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Exp(a) => sink.add_with(*a, |i| g[i] * out[i]),
            Op::Log(a) => {
                let x = self.val(*a);
                sink.add_with(*a, |i| g[i] / x[i]);
            }
            Op::Sqrt(a) => sink.add_with(*a, |i| if out[i] > 0.0 { g[i] * 0.5 / out[i] } else { 0.0 }),
            Op::Clamp { input, lo, hi } => {
                let x = self.val(*input);
                sink.add_with(*input, |i| if x[i] > *lo && x[i] < *hi { g[i] } else { 0.0 });
            }
            Op::Norm2(a) => {
                let x = self.val(*a);
                let nrm = out[0];
                sink.add_with(*a, |i| if nrm > 0.0 { g[0] * x[i] / nrm } else { 0.0 });
            }
            Op::Softmax { input, axis } => {
                let s = self.dims(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let ext = s[*axis];
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * ext * inner + a * inner + i;
                        let dotp: f64 = (0..ext).map(|a| g[at(a)] * out[at(a)]).sum();
                        for a in 0..ext {
                            dx[at(a)] = out[at(a)] * (g[at(a)] - dotp);
                        }
                    }
                }
                sink.add_vec(*input, &dx);
            }
            Op::LayerNorm { input, inv_std } => {
                let c = *self.dims(*input).last().unwrap();
                let mut dx = vec![0.0; out.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gy = &g[r * c..(r + 1) * c];
                    let y = &out[r * c..(r + 1) * c];
                    let mg = gy.iter().sum::<f64>() / c as f64;
                    let mgy = dot(gy, y) / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = is * (gy[j] - mg - y[j] * mgy);
                    }
                }
                sink.add_vec(*input, &dx);
            }
            Op::GatherRows { input, index } => {
                if sink.wants(*input) {
                    let c = self.dims(*input)[1];
                    let mut full = vec![0.0; self.nodes[input.0].value.numel()];
                    for (j, &i) in index.iter().enumerate() {
                        let i = i as usize;
                        for (f, &x) in full[i * c..(i + 1) * c].iter_mut().zip(&g[j * c..(j + 1) * c]) {
                            *f += x;
                        }
                    }
                    sink.add_vec(*input, &full);
                }
            }
            Op::ScatterAdd { input, index } => {
                if sink.wants(*input) {
                    let c = self.dims(*input)[1];
                    let mut part = Vec::with_capacity(index.len() * c);
                    for &i in index.iter() {
                        let i = i as usize;
                        part.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    sink.add_vec(*input, &part);
                }
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let si = self.dims(*input);
                let sw = self.dims(*weight);
                let (c, h, w) = (si[0], si[1], si[2]);
                let (o_ch, k) = (sw[0], sw[2]);
                let so = self.dims(Var(idx));
                let (ho, wo) = (so[1], so[2]);
                let x = self.val(*input);
                let wt = self.val(*weight);
                if sink.wants(*input) {
                    let mut dx = vec![0.0; x.len()];
                    conv2d_for_each(c, h, w, o_ch, k, *stride, *pad, ho, wo, |o, ci, ky, kx, oy, ox, iy, ix| {
                        dx[(ci * h + iy) * w + ix] += wt[((o * c + ci) * k + ky) * k + kx] * g[(o * ho + oy) * wo + ox];
                    });
                    sink.add_vec(*input, &dx);
                }
                if sink.wants(*weight) {
                    let mut dw = vec![0.0; wt.len()];
                    conv2d_for_each(c, h, w, o_ch, k, *stride, *pad, ho, wo, |o, ci, ky, kx, oy, ox, iy, ix| {
                        dw[((o * c + ci) * k + ky) * k + kx] += x[(ci * h + iy) * w + ix] * g[(o * ho + oy) * wo + ox];
                    });
                    sink.add_vec(*weight, &dw);
                }
                if let Some(b) = bias {
                    if sink.wants(*b) {
                        let db: Vec<f64> = (0..o_ch).map(|o| g[o * ho * wo..(o + 1) * ho * wo].iter().sum()).collect();
                        sink.add_vec(*b, &db);
                    }
                }
            }
            Op::UpsampleTranspose { input, weight, factor } => {
                let si = self.dims(*input);
                let (c, h, w) = (si[0], si[1], si[2]);
                let o_ch = self.dims(*weight)[1];
                let so = self.dims(Var(idx));
                let (out_h, out_w) = (so[1], so[2]);
                let s = *factor;
                let x = self.val(*input);
                let wt = self.val(*weight);
                let want_x = sink.wants(*input);
                let want_w = sink.wants(*weight);
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                let mut dw = vec![0.0; if want_w { wt.len() } else { 0 }];
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let xv = x[(ci * h + y) * w + xx];
                            let mut acc = 0.0;
                            for o in 0..o_ch {
                                for dy in 0..s {
                                    let oy = y * s + dy;
                                    if oy >= out_h {
                                        break;
                                    }
                                    for dxx in 0..s {
                                        let ox = xx * s + dxx;
                                        if ox >= out_w {
                                            break;
                                        }
                                        let gv = g[(o * out_h + oy) * out_w + ox];
                                        let wi = ((ci * o_ch + o) * s + dy) * s + dxx;
                                        acc += gv * wt[wi];
                                        if want_w {
                                            dw[wi] += gv * xv;
                                        }
                                    }
                                }
                            }
                            if want_x {
                                dx[(ci * h + y) * w + xx] = acc;
                            }
                        }
                    }
                }
                if want_x {
                    sink.add_vec(*input, &dx);
                }
                if want_w {
                    sink.add_vec(*weight, &dw);
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let x = self.val(*pred);
                sink.add_with(*pred, |i| {
                    let d = x[i] - target[i];
                    let s = if d.abs() < *beta { d / beta } else { d.signum() };
                    g[i] * s
                });
            }
            Op::Focal { logits, labels, weights, alpha, gamma } => {
                let x = self.val(*logits);
                sink.add_with(*logits, |i| {
                    if weights[i] == 0.0 {
                        0.0
                    } else {
                        g[i] * weights[i] * focal_grad(x[i], labels[i], *alpha, *gamma)
                    }
                });
            }
            Op::SparseConv { input, weight, rulebook } => {
                let sw = self.dims(*weight);
                let (cin, cout) = (sw[1], sw[2]);
                let x = self.val(*input);
                let wt = self.val(*weight);
                if sink.wants(*input) {
                    let mut dx = vec![0.0; x.len()];
                    for (k, pairs) in rulebook.taps.iter().enumerate() {
                        let wk = &wt[k * cin * cout..(k + 1) * cin * cout];
                        for &(i, o) in pairs {
                            let go = &g[o as usize * cout..(o as usize + 1) * cout];
                            let dxi = &mut dx[i as usize * cin..(i as usize + 1) * cin];
                            for (ci, d) in dxi.iter_mut().enumerate() {
                                *d += dot(go, &wk[ci * cout..(ci + 1) * cout]);
                            }
                        }
                    }
                    sink.add_vec(*input, &dx);
                }
                if sink.wants(*weight) {
                    let mut dw = vec![0.0; wt.len()];
                    for (k, pairs) in rulebook.taps.iter().enumerate() {
                        let dwk = &mut dw[k * cin * cout..(k + 1) * cin * cout];
                        for &(i, o) in pairs {
                            let go = &g[o as usize * cout..(o as usize + 1) * cout];
                            let xi = &x[i as usize * cin..(i as usize + 1) * cin];
                            for (ci, &xv) in xi.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in dwk[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                    sink.add_vec(*weight, &dw);
                }
            }
            Op::KnnAttention { query, keys, values, nbrs, scale, attn } => {
                let c = self.dims(*query)[1];
                let dv = self.dims(*values)[1];
                let q = self.val(*query);
                let k = self.val(*keys);
                let v = self.val(*values);
                let mut dq = vec![0.0; q.len()];
                let mut dk = vec![0.0; k.len()];
                let mut dvals = vec![0.0; v.len()];
                let offsets = nbrs.offsets();
                let mut da = Vec::new();
                for i in 0..nbrs.len() {
                    let row = nbrs.row(i);
                    if row.is_empty() {
                        continue;
                    }
                    let base = offsets[i];
                    let gi = &g[i * dv..(i + 1) * dv];
                    da.clear();
                    for (j, &kj) in row.iter().enumerate() {
                        let kj = kj as usize;
                        let a = attn[base + j];
                        for (d, &gv) in dvals[kj * dv..(kj + 1) * dv].iter_mut().zip(gi) {
                            *d += a * gv;
                        }
                        da.push(dot(gi, &v[kj * dv..(kj + 1) * dv]));
                    }
                    let mean_da: f64 = row.iter().enumerate().map(|(j, _)| attn[base + j] * da[j]).sum();
                    let qi = &q[i * c..(i + 1) * c];
                    for (j, &kj) in row.iter().enumerate() {
                        let kj = kj as usize;
                        let ds = scale * attn[base + j] * (da[j] - mean_da);
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..c {
                            dq[i * c + t] += ds * k[kj * c + t];
                            dk[kj * c + t] += ds * qi[t];
                        }
                    }
                }
                sink.add_vec(*query, &dq);
                sink.add_vec(*keys, &dk);
                sink.add_vec(*values, &dvals);
            }
            Op::NeighborMean { keys, nbrs } => {
                if sink.wants(*keys) {
                    let c = self.dims(*keys)[1];
                    let mut dk = vec![0.0; self.nodes[keys.0].value.numel()];
                    for i in 0..nbrs.len() {
                        let row = nbrs.row(i);
                        if row.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / row.len() as f64;
                        for &kj in row {
                            let kj = kj as usize;
                            for t in 0..c {
                                dk[kj * c + t] += g[i * c + t] * inv;
                            }
                        }
                    }
                    sink.add_vec(*keys, &dk);
                }
            }
        }
    }
}
