//! Arena-backed reverse-accumulation over vector operations.
//!
//! Model weights are not tape nodes: operations reference them by flat
//! ranges into the parameter vector, and `backward` accumulates their
//! gradients into one flat vector with matching indices. Leaf `input`
//! variables (latent vectors, for instance) get their own retrievable
//! gradients.

use super::{GgnnRanges, GruRanges};
use crate::molgraph::Bond;
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    MatVec {
        w: Range<usize>,
        b: Option<Range<usize>>,
        x: Var,
        rows: usize,
        cols: usize,
    },
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        mul: f64,
    },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    SumElems(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    /// ln Σ exp over scalar (length-1) variables.
    LogSumExp(Vec<Var>),
    /// One element of a vector as a scalar variable.
    Index(Var, usize),
    /// ln Σ exp over one vector's elements.
    LogSumExpVec(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    /// d(loss)/d(params), flat-indexed like the parameter vector.
    pub param: Vec<f64>,
    arena: Vec<f64>,
    offsets: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of the loss with respect to a tape variable (usually an
    /// `input` leaf).
    pub fn of(&self, var: Var) -> &[f64] {
        let (off, len) = self.offsets[var.0];
        &self.arena[off..off + len]
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, values: &[f64]) -> Var {
        let off = self.vals.len();
        self.vals.extend_from_slice(values);
        self.nodes.push(Node {
            op,
            off,
            len: values.len(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn val(&self, var: Var) -> &[f64] {
        let node = &self.nodes[var.0];
        &self.vals[node.off..node.off + node.len]
    }

    pub fn scalar_val(&self, var: Var) -> f64 {
        debug_assert_eq!(self.nodes[var.0].len, 1);
        self.vals[self.nodes[var.0].off]
    }

    pub fn input(&mut self, data: &[f64]) -> Var {
        self.push(Op::Input, data)
    }

    pub fn constant(&mut self, data: &[f64]) -> Var {
        self.push(Op::Const, data)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Const, &[value])
    }

    /// y = W x (+ b) with W a parameter range, row-major.
    pub fn matvec(&mut self, w: Range<usize>, b: Option<Range<usize>>, x: Var) -> Var {
        let cols = self.nodes[x.0].len;
        let rows = w.len() / cols;
        debug_assert_eq!(w.len(), rows * cols);
        if let Some(bias) = &b {
            debug_assert_eq!(bias.len(), rows);
        }
        let mut out = vec![0.0; rows];
        {
            let xs = self.val(x);
            let wslice = &self.params[w.clone()];
            for (r, slot) in out.iter_mut().enumerate() {
                let mut acc = match &b {
                    Some(bias) => self.params[bias.clone()][r],
                    None => 0.0,
                };
                for (wi, xi) in wslice[r * cols..(r + 1) * cols].iter().zip(xs) {
                    acc += wi * xi;
                }
                *slot = acc;
            }
        }
        self.push(Op::MatVec { w, b, x, rows, cols }, &out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_n(vec![a, b])
    }

    pub fn add_n(&mut self, terms: Vec<Var>) -> Var {
        debug_assert!(!terms.is_empty());
        let len = self.nodes[terms[0].0].len;
        let mut out = vec![0.0; len];
        for t in &terms {
            debug_assert_eq!(self.nodes[t.0].len, len);
            for (slot, x) in out.iter_mut().zip(self.val(*t)) {
                *slot += x;
            }
        }
        self.push(Op::AddN(terms), &out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(a, b), &out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), &out)
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out: Vec<f64> = self.val(x).iter().map(|v| mul * v + add).collect();
        self.push(Op::Affine { x, mul }, &out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.val(x).iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), &out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.val(x).iter().map(|v| super::sigmoid(*v)).collect();
        self.push(Op::Sigmoid(x), &out)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.val(x).iter().map(|v| v.exp()).collect();
        self.push(Op::Exp(x), &out)
    }

    pub fn sum_elems(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).iter().sum();
        self.push(Op::SumElems(x), &[s])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s: f64 = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), &[s])
    }

    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let mut out = Vec::new();
        for p in &parts {
            out.extend_from_slice(self.val(*p));
        }
        self.push(Op::Concat(parts), &out)
    }

    /// ln Σ exp over scalar variables, computed stably.
    pub fn logsumexp(&mut self, xs: Vec<Var>) -> Var {
        debug_assert!(!xs.is_empty());
        let vals: Vec<f64> = xs.iter().map(|v| self.scalar_val(*v)).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vals.iter().map(|v| (v - m).exp()).sum();
        self.push(Op::LogSumExp(xs), &[m + s.ln()])
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let value = self.val(x)[i];
        self.push(Op::Index(x, i), &[value])
    }

    /// ln Σ exp over the elements of one vector variable.
    pub fn logsumexp_vec(&mut self, x: Var) -> Var {
        let vals = self.val(x);
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vals.iter().map(|v| (v - m).exp()).sum();
        self.push(Op::LogSumExpVec(x), &[m + s.ln()])
    }

    /// Gated message passing on tape, mirroring the plain-forward version.
    pub fn ggnn(
        &mut self,
        ranges: &GgnnRanges,
        bonds: &[Bond],
        states: Vec<Var>,
        steps: usize,
    ) -> Vec<Var> {
        let n = states.len();
        let mut current = states;
        for _ in 0..steps {
            let d = self.nodes[current[0].0].len;
            let zero = self.constant(&vec![0.0; d]);
            let mut incoming: Vec<Vec<Var>> = vec![Vec::new(); n];
            for bond in bonds {
                let l = (bond.order - 1) as usize;
                let to_a = self.matvec(
                    ranges.edge_w[l].clone(),
                    Some(ranges.edge_b[l].clone()),
                    current[bond.b],
                );
                incoming[bond.a].push(to_a);
                let to_b = self.matvec(
                    ranges.edge_w[l].clone(),
                    Some(ranges.edge_b[l].clone()),
                    current[bond.a],
                );
                incoming[bond.b].push(to_b);
            }
            let mut next = Vec::with_capacity(n);
            for (v, msgs) in incoming.into_iter().enumerate() {
                let a = if msgs.is_empty() {
                    zero
                } else {
                    self.add_n(msgs)
                };
                next.push(self.gru_cell(&ranges.gru, current[v], a));
            }
            current = next;
        }
        current
    }

    fn gru_cell(&mut self, gru: &GruRanges, m: Var, a: Var) -> Var {
        let za = self.matvec(gru.wz.clone(), Some(gru.bz.clone()), a);
        let zu = self.matvec(gru.uz.clone(), None, m);
        let zsum = self.add(za, zu);
        let z = self.sigmoid(zsum);

        let ra = self.matvec(gru.wr.clone(), Some(gru.br.clone()), a);
        let ru = self.matvec(gru.ur.clone(), None, m);
        let rsum = self.add(ra, ru);
        let r = self.sigmoid(rsum);

        let rm = self.mul(r, m);
        let ha = self.matvec(gru.wh.clone(), Some(gru.bh.clone()), a);
        let hu = self.matvec(gru.uh.clone(), None, rm);
        let hsum = self.add(ha, hu);
        let cand = self.tanh(hsum);

        let keep = self.affine(z, -1.0, 1.0); // 1 - z
        let left = self.mul(keep, m);
        let right = self.mul(z, cand);
        self.add(left, right)
    }

    /// Reverse sweep from a scalar loss variable.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].len, 1, "loss must be scalar");
        let mut arena = vec![0.0; self.vals.len()];
        let mut param = vec![0.0; self.params.len()];
        arena[self.nodes[loss.0].off] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let (off, len) = (node.off, node.len);
            // skip untouched nodes cheaply
            if arena[off..off + len].iter().all(|g| *g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Input | Op::Const => {}
                Op::MatVec { w, b, x, rows, cols } => {
                    let xn = &self.nodes[x.0];
                    for r in 0..*rows {
                        let dy = arena[off + r];
                        if dy == 0.0 {
                            continue;
                        }
                        if let Some(bias) = b {
                            param[bias.start + r] += dy;
                        }
                        let wrow = w.start + r * cols;
                        for c in 0..*cols {
                            param[wrow + c] += dy * self.vals[xn.off + c];
                            arena[xn.off + c] += dy * self.params[wrow + c];
                        }
                    }
                }
                Op::AddN(terms) => {
                    for t in terms {
                        let tn = &self.nodes[t.0];
                        for i in 0..len {
                            arena[tn.off + i] += arena[off + i];
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let an = &self.nodes[a.0];
                    let bn = &self.nodes[b.0];
                    for i in 0..len {
                        arena[an.off + i] += arena[off + i];
                        arena[bn.off + i] -= arena[off + i];
                    }
                }
                Op::Mul(a, b) => {
                    let an = &self.nodes[a.0];
                    let bn = &self.nodes[b.0];
                    for i in 0..len {
                        let dy = arena[off + i];
                        arena[an.off + i] += dy * self.vals[bn.off + i];
                        arena[bn.off + i] += dy * self.vals[an.off + i];
                    }
                }
                Op::Affine { x, mul, .. } => {
                    let xn = &self.nodes[x.0];
                    for i in 0..len {
                        arena[xn.off + i] += mul * arena[off + i];
                    }
                }
                Op::Tanh(x) => {
                    let xn = &self.nodes[x.0];
                    for i in 0..len {
                        let y = self.vals[off + i];
                        arena[xn.off + i] += arena[off + i] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(x) => {
                    let xn = &self.nodes[x.0];
                    for i in 0..len {
                        let y = self.vals[off + i];
                        arena[xn.off + i] += arena[off + i] * y * (1.0 - y);
                    }
                }
                Op::Exp(x) => {
                    let xn = &self.nodes[x.0];
                    for i in 0..len {
                        arena[xn.off + i] += arena[off + i] * self.vals[off + i];
                    }
                }
                Op::SumElems(x) => {
                    let xn = &self.nodes[x.0];
                    let dy = arena[off];
                    for i in 0..xn.len {
                        arena[xn.off + i] += dy;
                    }
                }
                Op::Dot(a, b) => {
                    let an = &self.nodes[a.0];
                    let bn = &self.nodes[b.0];
                    let dy = arena[off];
                    for i in 0..an.len {
                        arena[an.off + i] += dy * self.vals[bn.off + i];
                        arena[bn.off + i] += dy * self.vals[an.off + i];
                    }
                }
                Op::Concat(parts) => {
                    let mut cursor = off;
                    for p in parts {
                        let pn = &self.nodes[p.0];
                        for i in 0..pn.len {
                            arena[pn.off + i] += arena[cursor + i];
                        }
                        cursor += pn.len;
                    }
                }
                Op::LogSumExp(xs) => {
                    let dy = arena[off];
                    let y = self.vals[off];
                    for xv in xs {
                        let xn = &self.nodes[xv.0];
                        arena[xn.off] += dy * (self.vals[xn.off] - y).exp();
                    }
                }
                Op::Index(x, i) => {
                    let xn = &self.nodes[x.0];
                    arena[xn.off + i] += arena[off];
                }
                Op::LogSumExpVec(x) => {
                    let dy = arena[off];
                    let y = self.vals[off];
                    let xn = &self.nodes[x.0];
                    for i in 0..xn.len {
                        arena[xn.off + i] += dy * (self.vals[xn.off + i] - y).exp();
                    }
                }
            }
        }

        Grads {
            param,
            arena,
            offsets: self.nodes.iter().map(|n| (n.off, n.len)).collect(),
        }
    }
}
