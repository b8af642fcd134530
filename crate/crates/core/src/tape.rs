//! Vector-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a forward computation as a list of nodes, each owning
//! a contiguous slice of an arena of `f64` values. Nodes are appended in
//! evaluation order, so a single reverse sweep from a scalar root
//! propagates adjoints to every ancestor and finally into a flat gradient
//! buffer indexed like the parameter buffer the forward pass read from.
//!
//! Operations are coarse (dense layers, grid gathers, volume weights)
//! rather than scalar, which keeps tapes for a whole ray to a few hundred
//! nodes.
//!
//! ```
//! use streetfield::tape::Tape;
//!
//! let params = vec![3.0];
//! let mut tape = Tape::new();
//! let theta = tape.param(&params, 0, 1);
//! let loss = tape.squared_error(theta, &[0.0]);
//! let mut grad = vec![0.0];
//! tape.backward(loss, &params, &mut grad);
//! assert_eq!(tape.scalar(loss), 9.0);
//! assert_eq!(grad[0], 6.0);
//! ```

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    /// Copy of `params[offset..offset + len]`.
    Param { offset: usize },
    /// `y = W x + b`, with `W` row-major `out x in` at `weight`.
    Linear { x: NodeId, weight: usize, bias: usize },
    /// `y = W x + base`, where `base` is another node of length `out`.
    Affine { x: NodeId, weight: usize, base: NodeId },
    Relu(NodeId),
    /// `softplus(x + shift)`.
    Softplus { x: NodeId, shift: f64 },
    Sigmoid(NodeId),
    Slice { x: NodeId, start: usize },
    Concat { parts: Range<usize> },
    /// `y[g*width + f] = Σ_k w[g*K + k] * params[idx[g*K + k] + f]`.
    Gather { taps: Range<usize>, per_group: usize, width: usize },
    /// Volume-rendering weights `w_i = T_i (1 - exp(-σ_i Δ_i))`.
    Weights { sigma: NodeId, deltas: Range<usize> },
    /// `y[c] = Σ_i w[i] * values[i*width + c]`.
    WeightedSum { w: NodeId, values: NodeId, width: usize },
    /// `Σ (x_i - target_i)^2`.
    SquaredError { x: NodeId, target: Range<usize> },
    /// `Σ Δ_i (w_i / Δ_i - target_i)^2`.
    DensityMatch { w: NodeId, deltas: Range<usize>, target: Range<usize> },
    /// `Σ coeff_j * x_j` over scalar nodes.
    Combine { parts: Range<usize>, coeffs: Range<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    len: usize,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    vals: Vec<f64>,
    nodes: Vec<Node>,
    links: Vec<NodeId>,
    aux: Vec<f64>,
    taps: Vec<(usize, f64)>,
    adj: Vec<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = W x + b`; shared by the tape and the tape-free inference path.
pub fn linear_forward(params: &[f64], weight: usize, bias: usize, x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &params[weight + o * n_in..weight + (o + 1) * n_in];
        let mut acc = params[bias + o];
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        *y = acc;
    }
}

/// Volume-rendering weights for densities `sigma` over bins `deltas`.
pub fn volume_weights(sigma: &[f64], deltas: &[f64], out: &mut [f64]) {
    let mut optical = 0.0f64;
    for i in 0..sigma.len() {
        let tau = sigma[i] * deltas[i];
        out[i] = (-optical).exp() * -(-tau).exp_m1();
        optical += tau;
    }
}

/// Forward pass of [`Tape::gather`].
pub fn gather_forward(params: &[f64], taps: &[(usize, f64)], per_group: usize, width: usize, out: &mut [f64]) {
    for (g, group) in taps.chunks_exact(per_group).enumerate() {
        let row = &mut out[g * width..(g + 1) * width];
        row.fill(0.0);
        for &(off, w) in group {
            for (f, y) in row.iter_mut().enumerate() {
                *y += w * params[off + f];
            }
        }
    }
}

/// Accumulates `dL/dW += g xᵀ` and `dL/dx += Wᵀ g` for a row-major `W`
/// stored at the start of `weight`.
fn dense_backward(x: &[f64], g_out: &[f64], weight: &[f64], grad_w: &mut [f64], adj_x: &mut [f64]) {
    let n_in = x.len();
    for (o, &g) in g_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let w = &weight[o * n_in..(o + 1) * n_in];
        let gw = &mut grad_w[o * n_in..(o + 1) * n_in];
        for k in 0..n_in {
            gw[k] += g * x[k];
            adj_x[k] += g * w[k];
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps allocations for reuse.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.nodes.clear();
        self.links.clear();
        self.aux.clear();
        self.taps.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, len: usize, op: Op) -> (NodeId, usize) {
        let start = self.vals.len();
        self.vals.resize(start + len, 0.0);
        self.nodes.push(Node { start, len, op });
        (NodeId(self.nodes.len() as u32 - 1), start)
    }

    fn range(&self, id: NodeId) -> Range<usize> {
        let n = &self.nodes[id.0 as usize];
        n.start..n.start + n.len
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.vals[self.range(id)]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0 as usize].len
    }

    fn push_aux(&mut self, data: &[f64]) -> Range<usize> {
        let s = self.aux.len();
        self.aux.extend_from_slice(data);
        s..self.aux.len()
    }

    pub fn constant(&mut self, data: &[f64]) -> NodeId {
        let (id, s) = self.push(data.len(), Op::Constant);
        self.vals[s..s + data.len()].copy_from_slice(data);
        id
    }

    pub fn param(&mut self, params: &[f64], offset: usize, len: usize) -> NodeId {
        let (id, s) = self.push(len, Op::Param { offset });
        self.vals[s..s + len].copy_from_slice(&params[offset..offset + len]);
        id
    }

    pub fn linear(&mut self, params: &[f64], x: NodeId, weight: usize, bias: usize, out_dim: usize) -> NodeId {
        let (id, s) = self.push(out_dim, Op::Linear { x, weight, bias });
        let xr = self.range(x);
        let (head, tail) = self.vals.split_at_mut(s);
        linear_forward(params, weight, bias, &head[xr], &mut tail[..out_dim]);
        id
    }

    /// Dense layer whose bias is a node; lets a per-ray term be shared by
    /// every sample on that ray.
    pub fn affine(&mut self, params: &[f64], x: NodeId, weight: usize, base: NodeId) -> NodeId {
        let out_dim = self.node_len(base);
        let (id, s) = self.push(out_dim, Op::Affine { x, weight, base });
        let (xr, br) = (self.range(x), self.range(base));
        let n_in = xr.len();
        for o in 0..out_dim {
            let row = &params[weight + o * n_in..weight + (o + 1) * n_in];
            let mut acc = self.vals[br.start + o];
            for k in 0..n_in {
                acc += row[k] * self.vals[xr.start + k];
            }
            self.vals[s + o] = acc;
        }
        id
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let len = self.node_len(x);
        let (id, s) = self.push(len, op);
        let xr = self.range(x);
        for (k, i) in xr.enumerate() {
            self.vals[s + k] = f(self.vals[i]);
        }
        id
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: NodeId, shift: f64) -> NodeId {
        self.unary(x, Op::Softplus { x, shift }, |v| softplus(v + shift))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (id, s) = self.push(len, Op::Slice { x, start });
        let xs = self.range(x).start + start;
        self.vals.copy_within(xs..xs + len, s);
        id
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let len = parts.iter().map(|&p| self.node_len(p)).sum();
        let l0 = self.links.len();
        self.links.extend_from_slice(parts);
        let (id, s) = self.push(len, Op::Concat { parts: l0..self.links.len() });
        let mut o = s;
        for &p in parts {
            let r = self.range(p);
            let n = r.len();
            self.vals.copy_within(r, o);
            o += n;
        }
        id
    }

    /// Weighted gather of parameter rows. `taps` holds `(offset, weight)`
    /// pairs, `per_group` consecutive taps produce one output row of `width`.
    pub fn gather(&mut self, params: &[f64], taps: &[(usize, f64)], per_group: usize, width: usize) -> NodeId {
        debug_assert!(per_group > 0 && taps.len() % per_group == 0);
        let groups = taps.len() / per_group;
        let t0 = self.taps.len();
        self.taps.extend_from_slice(taps);
        let (id, s) = self.push(
            groups * width,
            Op::Gather {
                taps: t0..self.taps.len(),
                per_group,
                width,
            },
        );
        gather_forward(params, taps, per_group, width, &mut self.vals[s..s + groups * width]);
        id
    }

    pub fn volume_weights(&mut self, sigma: NodeId, deltas: &[f64]) -> NodeId {
        let n = self.node_len(sigma);
        assert_eq!(n, deltas.len());
        let deltas_r = self.push_aux(deltas);
        let (id, s) = self.push(n, Op::Weights { sigma, deltas: deltas_r.clone() });
        let sr = self.range(sigma);
        let (head, tail) = self.vals.split_at_mut(s);
        volume_weights(&head[sr], &self.aux[deltas_r], &mut tail[..n]);
        id
    }

    pub fn weighted_sum(&mut self, w: NodeId, values: NodeId, width: usize) -> NodeId {
        let n = self.node_len(w);
        assert_eq!(self.node_len(values), n * width);
        let (id, s) = self.push(width, Op::WeightedSum { w, values, width });
        let (wr, vr) = (self.range(w), self.range(values));
        for c in 0..width {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.vals[wr.start + i] * self.vals[vr.start + i * width + c];
            }
            self.vals[s + c] = acc;
        }
        id
    }

    pub fn squared_error(&mut self, x: NodeId, target: &[f64]) -> NodeId {
        assert_eq!(self.node_len(x), target.len());
        let tr = self.push_aux(target);
        let (id, s) = self.push(1, Op::SquaredError { x, target: tr.clone() });
        let xr = self.range(x);
        self.vals[s] = self.vals[xr]
            .iter()
            .zip(&self.aux[tr])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        id
    }

    pub fn density_match(&mut self, w: NodeId, deltas: &[f64], target: &[f64]) -> NodeId {
        let n = self.node_len(w);
        assert!(deltas.len() == n && target.len() == n);
        let dr = self.push_aux(deltas);
        let tr = self.push_aux(target);
        let (id, s) = self.push(
            1,
            Op::DensityMatch {
                w,
                deltas: dr.clone(),
                target: tr.clone(),
            },
        );
        let wr = self.range(w);
        let mut acc = 0.0;
        for i in 0..n {
            let d = self.aux[dr.start + i];
            let e = self.vals[wr.start + i] / d - self.aux[tr.start + i];
            acc += d * e * e;
        }
        self.vals[s] = acc;
        id
    }

    pub fn combine(&mut self, parts: &[NodeId], coeffs: &[f64]) -> NodeId {
        assert_eq!(parts.len(), coeffs.len());
        let l0 = self.links.len();
        self.links.extend_from_slice(parts);
        let cr = self.push_aux(coeffs);
        let (id, s) = self.push(
            1,
            Op::Combine {
                parts: l0..self.links.len(),
                coeffs: cr,
            },
        );
        let v = parts.iter().zip(coeffs).map(|(&p, c)| c * self.scalar(p)).sum();
        self.vals[s] = v;
        id
    }

    /// Reverse sweep from scalar `root`, accumulating `d root / d params`
    /// into `grad`. `params` must be the buffer the forward pass read.
    pub fn backward(&mut self, root: NodeId, params: &[f64], grad: &mut [f64]) {
        assert_eq!(self.node_len(root), 1, "backward needs a scalar root");
        let mut adj = std::mem::take(&mut self.adj);
        adj.clear();
        adj.resize(self.vals.len(), 0.0);
        adj[self.range(root).start] = 1.0;

        for ni in (0..=root.0 as usize).rev() {
            let node = &self.nodes[ni];
            let out = node.start..node.start + node.len;
            if adj[out.clone()].iter().all(|&a| a == 0.0) {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (k, i) in out.enumerate() {
                        grad[offset + k] += adj[i];
                    }
                }
                Op::Linear { x, weight, bias } => {
                    let xr = self.range(*x);
                    let (before, after) = adj.split_at_mut(out.start);
                    let g_out = &after[..out.len()];
                    for (o, &g) in g_out.iter().enumerate() {
                        grad[bias + o] += g;
                    }
                    dense_backward(&self.vals[xr.clone()], g_out, &params[*weight..], &mut grad[*weight..], &mut before[xr]);
                }
                Op::Affine { x, weight, base } => {
                    let (xr, br) = (self.range(*x), self.range(*base));
                    let (before, after) = adj.split_at_mut(out.start);
                    let g_out = &after[..out.len()];
                    for (o, &g) in g_out.iter().enumerate() {
                        before[br.start + o] += g;
                    }
                    dense_backward(&self.vals[xr.clone()], g_out, &params[*weight..], &mut grad[*weight..], &mut before[xr]);
                }
                Op::Relu(x) => {
                    let xr = self.range(*x);
                    for (k, i) in out.enumerate() {
                        if self.vals[xr.start + k] > 0.0 {
                            adj[xr.start + k] += adj[i];
                        }
                    }
                }
                Op::Softplus { x, shift } => {
                    let xr = self.range(*x);
                    for (k, i) in out.enumerate() {
                        adj[xr.start + k] += adj[i] * sigmoid(self.vals[xr.start + k] + shift);
                    }
                }
                Op::Sigmoid(x) => {
                    let xr = self.range(*x);
                    for (k, i) in out.enumerate() {
                        let y = self.vals[i];
                        adj[xr.start + k] += adj[i] * y * (1.0 - y);
                    }
                }
                Op::Slice { x, start } => {
                    let xs = self.range(*x).start + start;
                    for (k, i) in out.enumerate() {
                        adj[xs + k] += adj[i];
                    }
                }
                Op::Concat { parts } => {
                    let mut o = out.start;
                    for p in &self.links[parts.clone()] {
                        let r = self.range(*p);
                        let n = r.len();
                        for k in 0..n {
                            adj[r.start + k] += adj[o + k];
                        }
                        o += n;
                    }
                }
                Op::Gather { taps, per_group, width } => {
                    let taps = &self.taps[taps.clone()];
                    for (g, group) in taps.chunks_exact(*per_group).enumerate() {
                        let a = &adj[out.start + g * width..out.start + (g + 1) * width];
                        for &(off, w) in group {
                            for (gf, af) in grad[off..off + width].iter_mut().zip(a) {
                                *gf += w * af;
                            }
                        }
                    }
                }
                Op::Weights { sigma, deltas } => {
                    let sr = self.range(*sigma);
                    let deltas = &self.aux[deltas.clone()];
                    let n = deltas.len();
                    // dw_i/dσ_k = -Δ_k w_i for i > k; T_k Δ_k e^{-σ_k Δ_k} for i = k.
                    let mut prefix = Vec::with_capacity(n);
                    let mut optical = 0.0f64;
                    for k in 0..n {
                        prefix.push(optical);
                        optical += self.vals[sr.start + k] * deltas[k];
                    }
                    let mut suffix = 0.0;
                    for k in (0..n).rev() {
                        let tau = self.vals[sr.start + k] * deltas[k];
                        let trans = (-prefix[k]).exp();
                        let gk = adj[out.start + k];
                        let w_k = self.vals[out.start + k];
                        adj[sr.start + k] += deltas[k] * (gk * trans * (-tau).exp() - suffix);
                        suffix += gk * w_k;
                    }
                }
                Op::WeightedSum { w, values, width } => {
                    let (wr, vr) = (self.range(*w), self.range(*values));
                    let n = wr.len();
                    for i in 0..n {
                        let mut gw = 0.0;
                        for c in 0..*width {
                            let a = adj[out.start + c];
                            gw += a * self.vals[vr.start + i * width + c];
                            adj[vr.start + i * width + c] += a * self.vals[wr.start + i];
                        }
                        adj[wr.start + i] += gw;
                    }
                }
                Op::SquaredError { x, target } => {
                    let g = adj[out.start];
                    let xr = self.range(*x);
                    for (k, t) in self.aux[target.clone()].iter().enumerate() {
                        adj[xr.start + k] += g * 2.0 * (self.vals[xr.start + k] - t);
                    }
                }
                Op::DensityMatch { w, deltas, target } => {
                    let g = adj[out.start];
                    let wr = self.range(*w);
                    for k in 0..wr.len() {
                        let d = self.aux[deltas.start + k];
                        let e = self.vals[wr.start + k] / d - self.aux[target.start + k];
                        adj[wr.start + k] += g * 2.0 * e;
                    }
                }
                Op::Combine { parts, coeffs } => {
                    let g = adj[out.start];
                    for (p, c) in self.links[parts.clone()].iter().zip(&self.aux[coeffs.clone()]) {
                        let s = self.range(*p).start;
                        adj[s] += g * c;
                    }
                }
            }
        }
        self.adj = adj;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `build` (which returns a scalar root).
    fn check(params: &[f64], build: impl Fn(&mut Tape, &[f64]) -> NodeId) {
        let mut tape = Tape::new();
        let root = build(&mut tape, params);
        let mut grad = vec![0.0; params.len()];
        tape.backward(root, params, &mut grad);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.to_vec();
            p[i] += h;
            let mut t = Tape::new();
            let r = build(&mut t, &p);
            let up = t.scalar(r);
            p[i] -= 2.0 * h;
            let mut t = Tape::new();
            let r = build(&mut t, &p);
            let fd = (up - t.scalar(r)) / (2.0 * h);
            let tol = 1e-6 * fd.abs().max(1.0);
            assert!((grad[i] - fd).abs() < tol, "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * 0.731).sin() * 0.8 + 0.05).collect()
    }

    #[test]
    fn linear_relu_sigmoid() {
        // x (3) -> W1 (4x3) + b1 -> relu -> W2 (2x4) + b2 -> sigmoid.
        let params = ramp(3 + 12 + 4 + 8 + 2);
        check(&params, |t, p| {
            let x = t.param(p, 0, 3);
            let h = t.linear(p, x, 3, 15, 4);
            let h = t.relu(h);
            let y = t.linear(p, h, 19, 27, 2);
            let y = t.sigmoid(y);
            t.squared_error(y, &[0.2, 0.9])
        });
    }

    #[test]
    fn affine_softplus_slice_concat() {
        let params = ramp(2 + 3 + 6 + 1);
        check(&params, |t, p| {
            let x = t.param(p, 0, 2);
            let base = t.param(p, 2, 3);
            let y = t.affine(p, x, 5, base);
            let s = t.softplus(y, -0.5);
            let a = t.slice(s, 1, 2);
            let b = t.param(p, 11, 1);
            let c = t.concat(&[a, b, x]);
            t.squared_error(c, &[0.0, 1.0, -1.0, 0.5, 0.25])
        });
    }

    #[test]
    fn gather_rows() {
        let params = ramp(12);
        let taps = [(0, 0.25), (4, 0.75), (2, 0.5), (8, 0.5)];
        check(&params, |t, p| {
            let g = t.gather(p, &taps, 2, 2);
            t.squared_error(g, &[0.1, -0.2, 0.3, 0.4])
        });
    }

    #[test]
    fn rendering_chain() {
        let n = 5;
        let params = ramp(2 * n + 3 * n);
        let deltas = [0.3, 0.5, 0.2, 0.8, 1.0];
        check(&params, |t, p| {
            let raw = t.param(p, 0, n);
            let sigma = t.softplus(raw, 0.0);
            let w = t.volume_weights(sigma, &deltas);
            let rgb = t.param(p, 2 * n, 3 * n);
            let rgb = t.sigmoid(rgb);
            let c = t.weighted_sum(w, rgb, 3);
            let l_rgb = t.squared_error(c, &[0.3, 0.6, 0.1]);
            let l_d = t.density_match(w, &deltas, &[0.0, 0.0, 2.0, 0.0, 0.0]);
            t.combine(&[l_rgb, l_d], &[1.0, 0.05])
        });
    }

    #[test]
    fn weights_match_closed_form() {
        let sigma = [0.5, 2.0, 0.0, 1.5];
        let deltas = [0.1, 0.3, 0.2, 0.4];
        let mut w = [0.0; 4];
        volume_weights(&sigma, &deltas, &mut w);
        let mut t = 1.0;
        for i in 0..4 {
            let a = 1.0 - (-sigma[i] * deltas[i]).exp();
            assert!((w[i] - t * a).abs() < 1e-15);
            t *= 1.0 - a;
        }
    }

    #[test]
    fn clear_reuses_tape() {
        let params = vec![2.0];
        let mut tape = Tape::new();
        for _ in 0..3 {
            tape.clear();
            let x = tape.param(&params, 0, 1);
            let l = tape.squared_error(x, &[0.5]);
            let mut g = vec![0.0];
            tape.backward(l, &params, &mut g);
            assert_eq!(g[0], 3.0);
        }
    }
}
