//! Reverse-mode differentiation over `C x H x W` feature maps.
//!
//! Every forward op appends a node holding its output; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Parameters live
//! outside the tape in a [`ParamSet`] and are referenced by tensor index.

use ndarray::Array3;
use nowcast_core::raster::{depth_to_space3, space_to_depth3};

use crate::params::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Input,
    /// Same-padded square convolution; `w` is `[out, in, k, k]`, `b` is `[out]`.
    Conv { x: NodeId, w: usize, b: usize },
    Add(NodeId, NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    SpaceToDepth(NodeId, usize),
    DepthToSpace(NodeId, usize),
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Array3<f64>>,
}

/// Adjoints of all parameters and of every input node.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    pub inputs: Vec<(NodeId, Array3<f64>)>,
}

impl Gradients {
    pub fn input(&self, id: NodeId) -> Option<&Array3<f64>> {
        self.inputs.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
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

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn conv_shape(params: &ParamSet, x: &Array3<f64>, w: usize, b: usize) -> Result<(usize, usize)> {
    let ws = &params.tensors[w].shape;
    let bs = &params.tensors[b].shape;
    if ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
        return Err(Error::Shape(format!("kernel shape {ws:?}")));
    }
    if ws[1] != x.dim().0 || bs != &[ws[0]] {
        return Err(Error::Shape(format!(
            "kernel {ws:?} / bias {bs:?} against input {:?}",
            x.dim()
        )));
    }
    Ok((ws[0], ws[2]))
}

/// Row/column ranges of output pixels whose tap `d` lands inside `0..n`.
fn tap_range(n: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

fn conv_forward(x: &Array3<f64>, kernel: &[f64], bias: &[f64], cout: usize, k: usize) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array3::zeros((cout, h, w));
    let os = out.as_slice_mut().unwrap();
    let p = (k / 2) as isize;
    let plane = h * w;
    for co in 0..cout {
        let o = &mut os[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..cin {
            let src = &xs[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let wv = kernel[((co * cin + ci) * k + ky) * k + kx];
                    let cols = tap_range(w, dx);
                    for y in tap_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + cols.start..y * w + cols.end];
                        let s0 = (cols.start as isize + dx) as usize;
                        let srow = &src[sy * w + s0..sy * w + s0 + cols.len()];
                        for (a, b) in orow.iter_mut().zip(srow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias adjoints of one convolution.
fn conv_backward(
    x: &Array3<f64>,
    kernel: &[f64],
    g: &Array3<f64>,
    k: usize,
    dx_out: &mut Array3<f64>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (cin, h, w) = x.dim();
    let cout = g.dim().0;
    let xs = x.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let dxs = dx_out.as_slice_mut().unwrap();
    let p = (k / 2) as isize;
    let plane = h * w;
    for co in 0..cout {
        let go = &gs[co * plane..(co + 1) * plane];
        db[co] += go.iter().sum::<f64>();
        for ci in 0..cin {
            let src = &xs[ci * plane..(ci + 1) * plane];
            let dsrc = &mut dxs[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let wi = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = kernel[wi];
                    let cols = tap_range(w, dx);
                    let mut acc = 0.0;
                    for y in tap_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let grow = &go[y * w + cols.start..y * w + cols.end];
                        let s0 = sy * w + (cols.start as isize + dx) as usize;
                        let srow = &src[s0..s0 + cols.len()];
                        for (a, b) in grow.iter().zip(srow) {
                            acc += a * b;
                        }
                        let drow = &mut dsrc[s0..s0 + cols.len()];
                        for (d, a) in drow.iter_mut().zip(grow) {
                            *d += wv * a;
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array3<f64> {
        &self.values[id.0]
    }

    fn push(&mut self, op: Op, v: Array3<f64>) -> NodeId {
        self.ops.push(op);
        self.values.push(v);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, x: Array3<f64>) -> NodeId {
        let x = x.as_standard_layout().into_owned();
        self.push(Op::Input, x)
    }

    pub fn conv(&mut self, params: &ParamSet, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let v = self.eval_conv(params, x, w, b)?;
        Ok(self.push(Op::Conv { x, w, b }, v))
    }

    fn eval_conv(&self, params: &ParamSet, x: NodeId, w: usize, b: usize) -> Result<Array3<f64>> {
        let xv = &self.values[x.0];
        let (cout, k) = conv_shape(params, xv, w, b)?;
        Ok(conv_forward(
            xv,
            &params.tensors[w].data,
            &params.tensors[b].data,
            cout,
            k,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].dim() != self.values[b.0].dim() {
            return Err(Error::Shape("add operands differ in shape".into()));
        }
        let v = &self.values[a.0] + &self.values[b.0];
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(silu);
        self.push(Op::Silu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn space_to_depth(&mut self, a: NodeId, block: usize) -> Result<NodeId> {
        let v = space_to_depth3(self.values[a.0].view(), block)?;
        Ok(self.push(Op::SpaceToDepth(a, block), v))
    }

    pub fn depth_to_space(&mut self, a: NodeId, block: usize) -> Result<NodeId> {
        let v = depth_to_space3(self.values[a.0].view(), block)?;
        Ok(self.push(Op::DepthToSpace(a, block), v))
    }

    /// Re-evaluates every node from the recorded inputs and `params`.
    pub fn replay(&self, params: &ParamSet) -> Result<Vec<Array3<f64>>> {
        let mut t = Tape::new();
        for (op, v) in self.ops.iter().zip(&self.values) {
            match *op {
                Op::Input => {
                    t.input(v.clone());
                }
                Op::Conv { x, w, b } => {
                    t.conv(params, x, w, b)?;
                }
                Op::Add(a, b) => {
                    t.add(a, b)?;
                }
                Op::Silu(a) => {
                    t.silu(a);
                }
                Op::Sigmoid(a) => {
                    t.sigmoid(a);
                }
                Op::SpaceToDepth(a, k) => {
                    t.space_to_depth(a, k)?;
                }
                Op::DepthToSpace(a, k) => {
                    t.depth_to_space(a, k)?;
                }
            }
        }
        Ok(t.values)
    }

    /// Adjoints of `sum(seed * value(out))` with respect to all parameters
    /// and all inputs.
    pub fn backward(&self, params: &ParamSet, out: NodeId, seed: &Array3<f64>) -> Result<Gradients> {
        if seed.dim() != self.values[out.0].dim() {
            return Err(Error::Shape(format!(
                "seed {:?} vs output {:?}",
                seed.dim(),
                self.values[out.0].dim()
            )));
        }
        let mut adj: Vec<Option<Array3<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed.as_standard_layout().into_owned());
        let mut grads = params.zeros_like();
        let mut inputs = Vec::new();

        fn acc(adj: &mut [Option<Array3<f64>>], id: NodeId, g: Array3<f64>) {
            match &mut adj[id.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match self.ops[i] {
                Op::Input => inputs.push((NodeId(i), g)),
                Op::Conv { x, w, b } => {
                    let xv = &self.values[x.0];
                    let k = params.tensors[w].shape[2];
                    let mut dx = Array3::zeros(xv.dim());
                    let (wt, bt) = if w < b {
                        let (lo, hi) = grads.tensors.split_at_mut(b);
                        (&mut lo[w], &mut hi[0])
                    } else {
                        let (lo, hi) = grads.tensors.split_at_mut(w);
                        (&mut hi[0], &mut lo[b])
                    };
                    conv_backward(xv, &params.tensors[w].data, &g, k, &mut dx, &mut wt.data, &mut bt.data);
                    acc(&mut adj, x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.clone());
                    acc(&mut adj, b, g);
                }
                Op::Silu(a) => {
                    let mut d = g;
                    d.zip_mut_with(&self.values[a.0], |d, &x| *d *= silu_grad(x));
                    acc(&mut adj, a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&self.values[i], |d, &s| *d *= s * (1.0 - s));
                    acc(&mut adj, a, d);
                }
                Op::SpaceToDepth(a, k) => acc(&mut adj, a, depth_to_space3(g.view(), k)?),
                Op::DepthToSpace(a, k) => acc(&mut adj, a, space_to_depth3(g.view(), k)?),
            }
        }
        inputs.reverse();
        Ok(Gradients {
            params: grads,
            inputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;
    use ndarray::Array;

    fn conv_params(cout: usize, cin: usize, k: usize) -> ParamSet {
        let mut p = ParamSet::default();
        let mut w = Tensor::zeros("w", &[cout, cin, k, k]);
        for (i, v) in w.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.1;
        }
        let mut b = Tensor::zeros("b", &[cout]);
        b.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.3);
        p.push(w);
        p.push(b);
        p
    }

    /// Direct definition of same-padded convolution.
    fn conv_oracle(x: &Array3<f64>, p: &ParamSet) -> Array3<f64> {
        let ws = &p.tensors[0].shape;
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        let (_, h, w) = x.dim();
        let r = (k / 2) as isize;
        Array::from_shape_fn((cout, h, w), |(co, y, xx)| {
            let mut s = p.tensors[1].data[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - r;
                        let sx = xx as isize + kx as isize - r;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            s += p.tensors[0].data[((co * cin + ci) * k + ky) * k + kx]
                                * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            s
        })
    }

    fn input(c: usize, h: usize, w: usize) -> Array3<f64> {
        Array::from_shape_fn((c, h, w), |(c, y, x)| ((c * 7 + y * 3 + x * 5) % 13) as f64 * 0.1 - 0.6)
    }

    #[test]
    fn conv_matches_definition() {
        let p = conv_params(3, 2, 3);
        let x = input(2, 5, 4);
        let mut t = Tape::new();
        let i = t.input(x.clone());
        let o = t.conv(&p, i, 0, 1).unwrap();
        let want = conv_oracle(&x, &p);
        for (a, b) in t.value(o).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let p = conv_params(3, 2, 3);
        let mut t = Tape::new();
        let i = t.input(input(4, 5, 4));
        assert!(t.conv(&p, i, 0, 1).is_err());
    }

    /// Scalar loss `sum(c * y)` over a small graph touching every op.
    fn graph(p: &ParamSet, x: &Array3<f64>) -> (Tape, NodeId) {
        let mut t = Tape::new();
        let i = t.input(x.clone());
        let s = t.space_to_depth(i, 2).unwrap();
        let a = t.silu(s);
        let d = t.depth_to_space(a, 2).unwrap();
        let c = t.conv(p, d, 0, 1).unwrap();
        let r = t.add(c, c).unwrap();
        let o = t.sigmoid(r);
        (t, o)
    }

    fn weights(shape: (usize, usize, usize)) -> Array3<f64> {
        Array::from_shape_fn(shape, |(c, y, x)| 0.2 + 0.1 * ((c + 2 * y + x) % 5) as f64)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut p = conv_params(2, 2, 3);
        let x = input(2, 4, 4);
        let (t, o) = graph(&p, &x);
        let c = weights(t.value(o).dim());
        let g = t.backward(&p, o, &c).unwrap();
        let loss = |p: &ParamSet, x: &Array3<f64>| {
            let (t, o) = graph(p, x);
            (t.value(o) * &c).sum()
        };
        let h = 1e-5;
        for i in 0..p.n_params() {
            let v = p.get_flat(i);
            p.set_flat(i, v + h);
            let up = loss(&p, &x);
            p.set_flat(i, v - h);
            let dn = loss(&p, &x);
            p.set_flat(i, v);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g.params.get_flat(i)).abs() < 1e-8, "param {i}");
        }
        let gx = g.input(NodeId(0)).unwrap();
        let mut xm = x.clone();
        for idx in 0..x.len() {
            let v = xm.as_slice().unwrap()[idx];
            xm.as_slice_mut().unwrap()[idx] = v + h;
            let up = loss(&p, &xm);
            xm.as_slice_mut().unwrap()[idx] = v - h;
            let dn = loss(&p, &xm);
            xm.as_slice_mut().unwrap()[idx] = v;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gx.as_slice().unwrap()[idx]).abs() < 1e-8, "input {idx}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let p = conv_params(2, 2, 3);
        let (t, _) = graph(&p, &input(2, 4, 4));
        let again = t.replay(&p).unwrap();
        assert_eq!(again.len(), t.len());
        for (i, v) in again.iter().enumerate() {
            assert_eq!(v, t.value(NodeId(i)));
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let p = conv_params(2, 2, 3);
        let (t, o) = graph(&p, &input(2, 4, 4));
        let g = t.backward(&p, o, &Array3::zeros(t.value(o).dim())).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_the_seed_doubles_gradients() {
        let p = conv_params(2, 2, 3);
        let (t, o) = graph(&p, &input(2, 4, 4));
        let c = weights(t.value(o).dim());
        let g1 = t.backward(&p, o, &c).unwrap();
        let g2 = t.backward(&p, o, &(&c * 2.0)).unwrap();
        for (a, b) in g1.params.iter().zip(g2.params.iter()) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
