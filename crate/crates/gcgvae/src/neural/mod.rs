//! Dense-numeric core: the flat parameter store, gated graph message
//! passing, small scoring networks, and a finite-difference gradient-check
//! harness. Analytic gradients come from the reverse-mode [`tape`]; the
//! grad-check tolerance, not the differentiation mechanism, is the contract.

pub mod tape;

use crate::molgraph::MolecularGraph;
use rand::Rng;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("state set is empty")]
    EmptyStates,
    #[error("loss is not finite at the evaluation point")]
    NonFiniteLoss,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Number of distinct bond orders the edge networks distinguish.
pub const BOND_TYPES: usize = 3;

/// Feature vector for edge scoring: [h_v ‖ h_u ‖ d_vu ‖ H_init ‖ H_t].
pub fn phi_dim(d: usize) -> usize {
    4 * d + 1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruRanges {
    pub wz: Range<usize>,
    pub uz: Range<usize>,
    pub bz: Range<usize>,
    pub wr: Range<usize>,
    pub ur: Range<usize>,
    pub br: Range<usize>,
    pub wh: Range<usize>,
    pub uh: Range<usize>,
    pub bh: Range<usize>,
}

/// Parameter ranges of one gated message-passing stack: per-bond-order edge
/// transforms plus the recurrent update cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GgnnRanges {
    pub edge_w: [Range<usize>; BOND_TYPES],
    pub edge_b: [Range<usize>; BOND_TYPES],
    pub gru: GruRanges,
}

/// Flat-vector addresses for every learned component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub d: usize,
    pub vocab_len: usize,
    // encoder: one-hot projection, message passing, Gaussian heads
    pub enc_init_w: Range<usize>,
    pub enc_init_b: Range<usize>,
    pub enc: GgnnRanges,
    pub mu_w: Range<usize>,
    pub mu_b: Range<usize>,
    pub sigma_w: Range<usize>,
    pub sigma_b: Range<usize>,
    // decoder: [z ‖ one-hot] projection and message passing
    pub dec_init_w: Range<usize>,
    pub dec_init_b: Range<usize>,
    pub dec: GgnnRanges,
    // label net f: d -> vocab scores
    pub label_w: Range<usize>,
    pub label_b: Range<usize>,
    // edge scorer C and per-order label scorers L_l over phi
    pub edge_score_w: Range<usize>,
    pub edge_score_b: Range<usize>,
    pub label_score_w: [Range<usize>; BOND_TYPES],
    pub label_score_b: [Range<usize>; BOND_TYPES],
    // stop logit over [h_v ‖ H_t]
    pub stop_w: Range<usize>,
    pub stop_b: Range<usize>,
    // gated regression heads
    pub g1_w: Range<usize>,
    pub g1_b: Range<usize>,
    pub g2_w: Range<usize>,
    pub g2_b: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(d: usize, vocab_len: usize) -> Self {
        let mut cursor = 0usize;
        let mut take = |len: usize| -> Range<usize> {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let ggnn = |take: &mut dyn FnMut(usize) -> Range<usize>| GgnnRanges {
            edge_w: [take(d * d), take(d * d), take(d * d)],
            edge_b: [take(d), take(d), take(d)],
            gru: GruRanges {
                wz: take(d * d),
                uz: take(d * d),
                bz: take(d),
                wr: take(d * d),
                ur: take(d * d),
                br: take(d),
                wh: take(d * d),
                uh: take(d * d),
                bh: take(d),
            },
        };
        let enc_init_w = take(d * vocab_len);
        let enc_init_b = take(d);
        let enc = ggnn(&mut take);
        let mu_w = take(d * d);
        let mu_b = take(d);
        let sigma_w = take(d * d);
        let sigma_b = take(d);
        let dec_init_w = take(d * (d + vocab_len));
        let dec_init_b = take(d);
        let dec = ggnn(&mut take);
        let label_w = take(vocab_len * d);
        let label_b = take(vocab_len);
        let p = phi_dim(d);
        let edge_score_w = take(p);
        let edge_score_b = take(1);
        let label_score_w = [take(p), take(p), take(p)];
        let label_score_b = [take(1), take(1), take(1)];
        let stop_w = take(2 * d);
        let stop_b = take(1);
        let g1_w = take(d);
        let g1_b = take(1);
        let g2_w = take(d);
        let g2_b = take(1);
        ParamLayout {
            d,
            vocab_len,
            enc_init_w,
            enc_init_b,
            enc,
            mu_w,
            mu_b,
            sigma_w,
            sigma_b,
            dec_init_w,
            dec_init_b,
            dec,
            label_w,
            label_b,
            edge_score_w,
            edge_score_b,
            label_score_w,
            label_score_b,
            stop_w,
            stop_b,
            g1_w,
            g1_b,
            g2_w,
            g2_b,
            total: cursor,
        }
    }
}

/// All learned weights, addressable through a single flat vector so that
/// gradient checks and SGD updates can index any coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub steps: usize,
    pub vocab: Vec<String>,
    pub layout: ParamLayout,
    pub flat: Vec<f64>,
}

pub const DEFAULT_HIDDEN_DIM: usize = 16;
pub const DEFAULT_GGNN_STEPS: usize = 4;

const CHECKPOINT_MAGIC: &str = "GCGVAE-PARAMS v1";

impl ModelParams {
    /// Fresh parameters drawn from a seeded uniform(−0.1, 0.1).
    pub fn init(d: usize, steps: usize, vocab: Vec<String>, rng: &mut impl Rng) -> Self {
        let layout = ParamLayout::new(d, vocab.len());
        let flat = (0..layout.total).map(|_| rng.gen_range(-0.1..0.1)).collect();
        ModelParams {
            d,
            steps,
            vocab,
            layout,
            flat,
        }
    }

    pub fn zeros(d: usize, steps: usize, vocab: Vec<String>) -> Self {
        let layout = ParamLayout::new(d, vocab.len());
        let flat = vec![0.0; layout.total];
        ModelParams {
            d,
            steps,
            vocab,
            layout,
            flat,
        }
    }

    pub fn vocab_index(&self, symbol: &str) -> Option<usize> {
        self.vocab.iter().position(|s| s == symbol)
    }

    pub fn slice(&self, range: &Range<usize>) -> &[f64] {
        &self.flat[range.clone()]
    }

    /// Serialize as a text header line plus little-endian 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut file = std::fs::File::create(path)?;
        writeln!(
            file,
            "{CHECKPOINT_MAGIC} d={} S={} vocab={}",
            self.d,
            self.steps,
            self.vocab.len()
        )?;
        let mut bytes = Vec::with_capacity(self.flat.len() * 8);
        for value in &self.flat {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Load a checkpoint; the vocabulary itself is not stored, so the
    /// caller supplies the same vocabulary the checkpoint was trained with
    /// and the header count is cross-checked.
    pub fn load(path: &Path, vocab: Vec<String>) -> Result<Self, NeuralError> {
        let mut file = std::fs::File::open(path)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        let newline = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| NeuralError::BadCheckpoint("missing header line".to_string()))?;
        let header = std::str::from_utf8(&raw[..newline])
            .map_err(|_| NeuralError::BadCheckpoint("header is not UTF-8".to_string()))?;
        let mut parts = header.split_whitespace();
        let magic = format!(
            "{} {}",
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default()
        );
        if magic != CHECKPOINT_MAGIC {
            return Err(NeuralError::BadCheckpoint(format!(
                "unexpected magic {magic:?}"
            )));
        }
        let mut d = None;
        let mut steps = None;
        let mut vocab_len = None;
        for part in parts {
            if let Some(v) = part.strip_prefix("d=") {
                d = v.parse().ok();
            } else if let Some(v) = part.strip_prefix("S=") {
                steps = v.parse().ok();
            } else if let Some(v) = part.strip_prefix("vocab=") {
                vocab_len = v.parse().ok();
            }
        }
        let (d, steps, vocab_len): (usize, usize, usize) = match (d, steps, vocab_len) {
            (Some(d), Some(s), Some(v)) => (d, s, v),
            _ => {
                return Err(NeuralError::BadCheckpoint(format!(
                    "malformed header {header:?}"
                )))
            }
        };
        if vocab_len != vocab.len() {
            return Err(NeuralError::BadCheckpoint(format!(
                "vocabulary size mismatch: header says {vocab_len}, table has {}",
                vocab.len()
            )));
        }
        let layout = ParamLayout::new(d, vocab_len);
        let body = &raw[newline + 1..];
        if body.len() != layout.total * 8 {
            return Err(NeuralError::BadCheckpoint(format!(
                "expected {} parameter bytes, found {}",
                layout.total * 8,
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ModelParams {
            d,
            steps,
            vocab,
            layout,
            flat,
        })
    }
}

/// Per-node hidden vectors, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    dim: usize,
    data: Vec<f64>,
}

impl NodeStates {
    pub fn zeros(nodes: usize, dim: usize) -> Self {
        NodeStates {
            dim,
            data: vec![0.0; nodes * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            assert_eq!(row.len(), dim);
            data.extend_from_slice(row);
        }
        NodeStates { dim, data }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// y = W x + b with row-major W.
pub fn matvec(w: &[f64], b: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let rows = out.len();
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    for (r, slot) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = match b {
            Some(bias) => bias[r],
            None => 0.0,
        };
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *slot = acc;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One gated recurrent update: state `m`, aggregated message `a`.
fn gru_cell(params: &ModelParams, gru: &GruRanges, m: &[f64], a: &[f64], out: &mut [f64]) {
    let d = m.len();
    let mut z = vec![0.0; d];
    let mut zu = vec![0.0; d];
    matvec(params.slice(&gru.wz), Some(params.slice(&gru.bz)), a, &mut z);
    matvec(params.slice(&gru.uz), None, m, &mut zu);
    for i in 0..d {
        z[i] = sigmoid(z[i] + zu[i]);
    }
    let mut r = vec![0.0; d];
    let mut ru = vec![0.0; d];
    matvec(params.slice(&gru.wr), Some(params.slice(&gru.br)), a, &mut r);
    matvec(params.slice(&gru.ur), None, m, &mut ru);
    for i in 0..d {
        r[i] = sigmoid(r[i] + ru[i]);
    }
    let rm: Vec<f64> = r.iter().zip(m).map(|(ri, mi)| ri * mi).collect();
    let mut h = vec![0.0; d];
    let mut hu = vec![0.0; d];
    matvec(params.slice(&gru.wh), Some(params.slice(&gru.bh)), a, &mut h);
    matvec(params.slice(&gru.uh), None, &rm, &mut hu);
    for i in 0..d {
        let cand = (h[i] + hu[i]).tanh();
        out[i] = (1.0 - z[i]) * m[i] + z[i] * cand;
    }
}

/// Gated message passing over the graph's typed bonds, starting from the
/// given states. A graph with no bonds still updates every node through the
/// recurrent cell on a zero message. `steps = 0` is the identity.
pub fn ggnn_propagate(
    states: &NodeStates,
    graph: &MolecularGraph,
    params: &ModelParams,
    steps: usize,
) -> Result<NodeStates, NeuralError> {
    propagate_with(states, graph, params, &params.layout.dec.clone(), steps)
}

/// Propagation with an explicit weight stack (encoder or decoder).
pub fn propagate_with(
    states: &NodeStates,
    graph: &MolecularGraph,
    params: &ModelParams,
    ranges: &GgnnRanges,
    steps: usize,
) -> Result<NodeStates, NeuralError> {
    if states.len() != graph.atom_count() {
        return Err(NeuralError::DimensionMismatch {
            expected: graph.atom_count(),
            got: states.len(),
        });
    }
    if states.dim() != params.d {
        return Err(NeuralError::DimensionMismatch {
            expected: params.d,
            got: states.dim(),
        });
    }
    let d = params.d;
    let n = states.len();
    let mut current = states.clone();
    let mut messages = vec![0.0; n * d];
    let mut transformed = vec![0.0; d];
    for _ in 0..steps {
        messages.iter_mut().for_each(|m| *m = 0.0);
        for bond in graph.bonds() {
            let l = (bond.order - 1) as usize;
            let w = params.slice(&ranges.edge_w[l]);
            let b = params.slice(&ranges.edge_b[l]);
            // message a<-b
            matvec(w, Some(b), current.node(bond.b), &mut transformed);
            for (slot, t) in messages[bond.a * d..(bond.a + 1) * d]
                .iter_mut()
                .zip(&transformed)
            {
                *slot += t;
            }
            // message b<-a
            matvec(w, Some(b), current.node(bond.a), &mut transformed);
            for (slot, t) in messages[bond.b * d..(bond.b + 1) * d]
                .iter_mut()
                .zip(&transformed)
            {
                *slot += t;
            }
        }
        let mut next = NodeStates::zeros(n, d);
        for v in 0..n {
            gru_cell(
                params,
                &ranges.gru,
                current.node(v),
                &messages[v * d..(v + 1) * d],
                next.node_mut(v),
            );
        }
        current = next;
    }
    Ok(current)
}

/// Mean over node vectors; the whole-graph summary H.
pub fn global_aggregate(states: &NodeStates) -> Result<Vec<f64>, NeuralError> {
    if states.is_empty() {
        return Err(NeuralError::EmptyStates);
    }
    let n = states.len() as f64;
    let mut out = vec![0.0; states.dim()];
    for i in 0..states.len() {
        for (slot, x) in out.iter_mut().zip(states.node(i)) {
            *slot += x;
        }
    }
    for slot in &mut out {
        *slot /= n;
    }
    Ok(out)
}

/// Standard normal draw via Box–Muller; keeps the dependency surface small
/// and the stream portable for a given generator.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Compare an analytic gradient against central differences at `probes`
/// random coordinates of `theta`. Returns the worst relative error, where
/// the denominator is floored at 1e−2 so near-zero entries are judged on a
/// 1e−6-style absolute scale when tested against a 1e−4 tolerance.
pub fn grad_check<F>(
    mut loss: F,
    theta: &[f64],
    analytic: &[f64],
    probes: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<f64, NeuralError>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(NeuralError::DimensionMismatch {
            expected: theta.len(),
            got: analytic.len(),
        });
    }
    if !loss(theta).is_finite() {
        return Err(NeuralError::NonFiniteLoss);
    }
    let coords: Vec<usize> = if probes >= theta.len() {
        (0..theta.len()).collect()
    } else {
        (0..probes).map(|_| rng.gen_range(0..theta.len())).collect()
    };
    let mut work = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss(&work);
        work[i] = orig - h;
        let minus = loss(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NeuralError::NonFiniteLoss);
        }
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-2);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
