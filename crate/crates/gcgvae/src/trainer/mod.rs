//! VAE training: the GGNN encoder with per-node Gaussians, the KL
//! regularizer, breadth-first trace supervision with a Monte-Carlo
//! reconstruction bound, the gated-regression property head, latent-space
//! gradient ascent, and the combined objective
//! L = L_recon + λ1·L_latent + λ2·L_Q.

mod traces;

pub use traces::{
    enumerate_all_traces, extract_traces, replay_matches, GenerationTrace, TraceAction, TraceStep,
};

use crate::fitness;
use crate::generator::{
    compute_masks, edge_distribution, distance_feature, project_initial_states, GenerationState,
    GeneratorError, LatentSpec,
};
use crate::molgraph::MolecularGraph;
use crate::neural::tape::{Tape, Var};
use crate::neural::{
    global_aggregate, matvec, propagate_with, standard_normal, sigmoid, ModelParams, NeuralError,
    NodeStates,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("graph has no atoms")]
    EmptyGraph,
    #[error("graph is not connected")]
    Disconnected,
    #[error("element {0:?} is not in the model vocabulary")]
    VocabMismatch(String),
    #[error("{expected} property targets expected, got {got}")]
    TargetCount { expected: usize, got: usize },
    #[error("trace action at focus {focus} (target {target}, order {order}) is masked-impossible: trace or graph corrupt")]
    MaskedAction {
        focus: usize,
        target: usize,
        order: u8,
    },
    #[error("trace is inconsistent with its source graph: {0}")]
    TraceCorrupt(&'static str),
    #[error("non-finite loss at epoch {epoch}, graph {graph}")]
    NonFinite { epoch: usize, graph: usize },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Fitness(#[from] fitness::FitnessError),
}

/// Per-node posterior for the latent code; σ is stored through the
/// exponential of an unconstrained pre-activation and is always positive.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_pre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub traces_per_graph: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.3,
            lambda2: 10.0,
            traces_per_graph: 4,
            learning_rate: 0.01,
            epochs: 50,
            seed: 0,
        }
    }
}

/// One training-log row; `recon` covers the full reconstruction term
/// (trace bound plus node-label likelihood).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub latent: f64,
    pub q: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.total, self.recon, self.latent, self.q
        )
    }

    pub fn log_header() -> &'static str {
        "epoch\tL_total\tL_recon\tL_latent\tL_Q"
    }
}

/// Vocabulary indices of a graph's atoms.
pub fn graph_labels(graph: &MolecularGraph, params: &ModelParams) -> Result<Vec<usize>, TrainError> {
    graph
        .atoms()
        .iter()
        .map(|a| {
            params
                .vocab_index(&a.symbol)
                .ok_or_else(|| TrainError::VocabMismatch(a.symbol.clone()))
        })
        .collect()
}

fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Encode a graph to per-node Gaussians: element one-hots through the
/// encoder projection, message passing, then the μ and log-σ heads.
pub fn encode(graph: &MolecularGraph, params: &ModelParams) -> Result<Vec<NodeGaussian>, TrainError> {
    if graph.atom_count() == 0 {
        return Err(TrainError::EmptyGraph);
    }
    let labels = graph_labels(graph, params)?;
    let d = params.d;
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&label| {
            let onehot = one_hot(label, params.vocab.len());
            let mut h = vec![0.0; d];
            matvec(
                params.slice(&params.layout.enc_init_w),
                Some(params.slice(&params.layout.enc_init_b)),
                &onehot,
                &mut h,
            );
            h.iter_mut().for_each(|x| *x = x.tanh());
            h
        })
        .collect();
    let states = propagate_with(
        &NodeStates::from_rows(&rows),
        graph,
        params,
        &params.layout.enc.clone(),
        params.steps,
    )?;
    let mut out = Vec::with_capacity(graph.atom_count());
    for v in 0..graph.atom_count() {
        let mut mu = vec![0.0; d];
        matvec(
            params.slice(&params.layout.mu_w),
            Some(params.slice(&params.layout.mu_b)),
            states.node(v),
            &mut mu,
        );
        let mut sigma_pre = vec![0.0; d];
        matvec(
            params.slice(&params.layout.sigma_w),
            Some(params.slice(&params.layout.sigma_b)),
            states.node(v),
            &mut sigma_pre,
        );
        let sigma = sigma_pre.iter().map(|s| s.exp()).collect();
        out.push(NodeGaussian { mu, sigma, sigma_pre });
    }
    Ok(out)
}

/// Σ_v KL(N(μ_v, diag σ_v²) ‖ N(0, I)) = Σ_v Σ_i ½(μ² + σ² − 1 − 2 ln σ).
pub fn kl_loss(gaussians: &[NodeGaussian]) -> f64 {
    let mut total = 0.0;
    for g in gaussians {
        for i in 0..g.mu.len() {
            let mu = g.mu[i];
            let sigma = g.sigma[i];
            let ln_sigma = g.sigma_pre[i];
            total += 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * ln_sigma);
        }
    }
    total
}

/// Reparameterized posterior draw: z = μ + σ·ξ.
pub fn sample_latents_from(
    gaussians: &[NodeGaussian],
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    gaussians
        .iter()
        .map(|g| {
            g.mu.iter()
                .zip(&g.sigma)
                .map(|(m, s)| m + s * standard_normal(rng))
                .collect()
        })
        .collect()
}

/// −Σ_v log p(τ_v = τ*_v | z_v) under the label-net softmax.
pub fn node_label_loss(
    graph: &MolecularGraph,
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<f64, TrainError> {
    if z.len() != graph.atom_count() {
        return Err(TrainError::TraceCorrupt("one latent per atom required"));
    }
    let labels = graph_labels(graph, params)?;
    let mut loss = 0.0;
    for (zv, &label) in z.iter().zip(&labels) {
        let scores = crate::generator::label_scores(params, zv);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        loss -= scores[label] - lse;
    }
    Ok(loss)
}

/// Gated regression R(z) = Σ_v σ(g1(z_v))·g2(z_v).
pub fn property_score(z: &[Vec<f64>], params: &ModelParams) -> f64 {
    let mut total = 0.0;
    for zv in z {
        let mut gate = [0.0];
        matvec(
            params.slice(&params.layout.g1_w),
            Some(params.slice(&params.layout.g1_b)),
            zv,
            &mut gate,
        );
        let mut value = [0.0];
        matvec(
            params.slice(&params.layout.g2_w),
            Some(params.slice(&params.layout.g2_b)),
            zv,
            &mut value,
        );
        total += sigmoid(gate[0]) * value[0];
    }
    total
}

/// Bookkeeping-only replay state: real atoms (so valence caps include any
/// explicit hydrogens), no bonds yet, fixed first focus.
fn replay_state(
    graph: &MolecularGraph,
    spec: &LatentSpec,
    params: &ModelParams,
    first_focus: usize,
) -> Result<GenerationState, TrainError> {
    let n = graph.atom_count();
    if n == 0 {
        return Err(TrainError::EmptyGraph);
    }
    let bare = MolecularGraph::from_parts(graph.atoms().to_vec(), Vec::new());
    let init_states = project_initial_states(params, spec)?;
    let h_init = global_aggregate(&init_states)?;
    let mut connected = vec![false; n];
    connected[first_focus] = true;
    Ok(GenerationState {
        graph: bare,
        latents: spec.latents.clone(),
        states: init_states.clone(),
        init_states,
        h_init,
        queue: VecDeque::from([first_focus]),
        closed: vec![false; n],
        connected,
        first_focus,
        step: 0,
    })
}

fn spec_for(graph: &MolecularGraph, z: &[Vec<f64>], params: &ModelParams) -> Result<LatentSpec, TrainError> {
    Ok(LatentSpec {
        latents: z.to_vec(),
        labels: graph_labels(graph, params)?,
    })
}

/// Log-probability of one trace under the model: uniform first-focus choice
/// (deterministic zero afterwards, per the breadth-first queue) plus the
/// masked-distribution log-probability of every recorded action, stops
/// included.
pub fn trace_log_prob(
    trace: &GenerationTrace,
    graph: &MolecularGraph,
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<f64, TrainError> {
    let spec = spec_for(graph, z, params)?;
    let mut state = replay_state(graph, &spec, params, trace.first_focus)?;
    let mut lp = -(trace.atoms as f64).ln();
    for step in &trace.steps {
        let v = state.focus().ok_or(TrainError::TraceCorrupt("queue exhausted early"))?;
        if v != step.focus {
            return Err(TrainError::TraceCorrupt("focus order mismatch"));
        }
        let dist = edge_distribution(&state, v, params)?;
        match step.action {
            TraceAction::Edge { target, order } => {
                let cand = dist
                    .candidates
                    .iter()
                    .find(|c| c.target == target && c.order == order)
                    .ok_or(TrainError::MaskedAction { focus: v, target, order })?;
                lp += cand.probability.ln();
                state.apply_edge(target, order, params, true)?;
            }
            TraceAction::Stop => {
                lp += dist.stop_probability.ln();
                state.apply_stop()?;
            }
        }
    }
    Ok(lp)
}

/// Monte-Carlo reconstruction loss: the negated trace lower bound
/// −[ln |Π̂| + (1/k) Σ log p(π)], with |Π̂| the mean of the per-trace
/// enumeration-count estimates (first-focus choices × shuffle factorials).
pub fn recon_loss(
    graph: &MolecularGraph,
    traces: &[GenerationTrace],
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<f64, TrainError> {
    if traces.is_empty() {
        return Err(TrainError::TraceCorrupt("no traces supplied"));
    }
    let mut lp_sum = 0.0;
    let mut pi_sum = 0.0;
    for trace in traces {
        lp_sum += trace_log_prob(trace, graph, z, params)?;
        pi_sum += trace.trace_count_estimate();
    }
    let k = traces.len() as f64;
    Ok(-(((pi_sum / k).ln()) + lp_sum / k))
}

/// The same bound computed over the exhaustively enumerated trace set, with
/// the exact |Π|. Exponential; oracle use only.
pub fn recon_loss_exhaustive(
    graph: &MolecularGraph,
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<f64, TrainError> {
    let all = enumerate_all_traces(graph)?;
    let mut lp_sum = 0.0;
    for trace in &all {
        lp_sum += trace_log_prob(trace, graph, z, params)?;
    }
    let count = all.len() as f64;
    Ok(-(count.ln() + lp_sum / count))
}

/// Pooled per-state estimator: states are merged across the sampled traces
/// with multiplicity |s| and each state contributes the average
/// log-probability of its valid expansions, weighted |s|/|E_s|. Equals the
/// direct per-trace mean only when trace flow through each state is
/// uniform, which the sampled bound does not rely on; this variant exists
/// for comparison and diagnostics.
pub fn recon_loss_pooled(
    graph: &MolecularGraph,
    traces: &[GenerationTrace],
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<f64, TrainError> {
    use std::collections::BTreeMap;
    if traces.is_empty() {
        return Err(TrainError::TraceCorrupt("no traces supplied"));
    }
    let spec = spec_for(graph, z, params)?;
    // state signature -> (multiplicity, per-state average log prob)
    let mut pool: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut pi_sum = 0.0;
    for trace in traces {
        pi_sum += trace.trace_count_estimate();
        let mut state = replay_state(graph, &spec, params, trace.first_focus)?;
        let mut built: Vec<bool> = vec![false; graph.bond_count()];
        for step in &trace.steps {
            let v = state.focus().ok_or(TrainError::TraceCorrupt("queue exhausted early"))?;
            let signature = {
                let mut bonds: Vec<String> = state
                    .graph
                    .bonds()
                    .iter()
                    .map(|b| format!("{}-{}:{}", b.a, b.b, b.order))
                    .collect();
                bonds.sort();
                format!(
                    "f{v};c{:?};{}",
                    state.closed.iter().map(|&c| c as u8).collect::<Vec<_>>(),
                    bonds.join(",")
                )
            };
            if !pool.contains_key(&signature) {
                let dist = edge_distribution(&state, v, params)?;
                // E_s: true remaining edges of the focus in the source graph
                let remaining: Vec<(usize, u8)> = graph
                    .bonds()
                    .iter()
                    .enumerate()
                    .filter(|(i, b)| !built[*i] && (b.a == v || b.b == v))
                    .map(|(_, b)| (if b.a == v { b.b } else { b.a }, b.order))
                    .collect();
                let contribution = if remaining.is_empty() {
                    dist.stop_probability.ln()
                } else {
                    let mut sum = 0.0;
                    for (target, order) in &remaining {
                        let cand = dist
                            .candidates
                            .iter()
                            .find(|c| c.target == *target && c.order == *order)
                            .ok_or(TrainError::MaskedAction {
                                focus: v,
                                target: *target,
                                order: *order,
                            })?;
                        sum += cand.probability.ln();
                    }
                    sum / remaining.len() as f64
                };
                pool.insert(signature.clone(), (0, contribution));
            }
            pool.get_mut(&signature).unwrap().0 += 1;

            match step.action {
                TraceAction::Edge { target, order } => {
                    let idx = graph
                        .bonds()
                        .iter()
                        .position(|b| {
                            !built[graph.bonds().iter().position(|x| x == b).unwrap()]
                                && (b.a == v.min(target) && b.b == v.max(target))
                        })
                        .ok_or(TrainError::TraceCorrupt("edge not in source graph"))?;
                    built[idx] = true;
                    state.apply_edge(target, order, params, true)?;
                }
                TraceAction::Stop => {
                    state.apply_stop()?;
                }
            }
        }
    }
    let k = traces.len() as f64;
    let pooled: f64 = pool.values().map(|(count, avg)| (*count as f64) * avg).sum();
    let focus_terms = -(graph.atom_count() as f64).ln();
    Ok(-(((pi_sum / k).ln()) + focus_terms + pooled / k))
}

/// Gradient ascent over a supplied objective with projection onto the ball
/// of the given radius; returns the best visited point.
pub fn ascend_with<F>(
    z0: &[Vec<f64>],
    steps: usize,
    step_size: f64,
    radius: f64,
    mut objective: F,
) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let mut z: Vec<Vec<f64>> = z0.to_vec();
    let (mut best_value, _) = objective(&z);
    let mut best = z.clone();
    for _ in 0..steps {
        let (_, grad) = objective(&z);
        for (zv, gv) in z.iter_mut().zip(&grad) {
            for (zi, gi) in zv.iter_mut().zip(gv) {
                *zi += step_size * gi;
            }
            let norm = zv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > radius {
                let scale = radius / norm;
                zv.iter_mut().for_each(|x| *x *= scale);
            }
        }
        let (value, _) = objective(&z);
        if value > best_value {
            best_value = value;
            best = z.clone();
        }
    }
    best
}

/// Gradient-ascend the gated regression score in latent space, keeping each
/// z_v inside the 3√d ball of the standard normal.
pub fn latent_ascend(
    z0: &[Vec<f64>],
    params: &ModelParams,
    steps: usize,
    step_size: f64,
) -> Vec<Vec<f64>> {
    let radius = 3.0 * (params.d as f64).sqrt();
    ascend_with(z0, steps, step_size, radius, |z| {
        let mut tape = Tape::new(&params.flat);
        let zvars: Vec<Var> = z.iter().map(|zv| tape.input(zv)).collect();
        let r = property_tape(&mut tape, &zvars, params);
        let value = tape.scalar_val(r);
        let grads = tape.backward(r);
        let grad: Vec<Vec<f64>> = zvars.iter().map(|v| grads.of(*v).to_vec()).collect();
        (value, grad)
    })
}

// ---- tape loss builders -------------------------------------------------

pub(crate) struct TapeEncode {
    pub mus: Vec<Var>,
    pub sigma_pres: Vec<Var>,
}

pub(crate) fn encode_tape(
    tape: &mut Tape,
    graph: &MolecularGraph,
    labels: &[usize],
    params: &ModelParams,
) -> TapeEncode {
    let vocab_len = params.vocab.len();
    let h0: Vec<Var> = labels
        .iter()
        .map(|&label| {
            let onehot = tape.constant(&one_hot(label, vocab_len));
            let lin = tape.matvec(
                params.layout.enc_init_w.clone(),
                Some(params.layout.enc_init_b.clone()),
                onehot,
            );
            tape.tanh(lin)
        })
        .collect();
    let states = tape.ggnn(&params.layout.enc, graph.bonds(), h0, params.steps);
    let mus = states
        .iter()
        .map(|&h| tape.matvec(params.layout.mu_w.clone(), Some(params.layout.mu_b.clone()), h))
        .collect();
    let sigma_pres = states
        .iter()
        .map(|&h| {
            tape.matvec(
                params.layout.sigma_w.clone(),
                Some(params.layout.sigma_b.clone()),
                h,
            )
        })
        .collect();
    TapeEncode { mus, sigma_pres }
}

pub(crate) fn kl_tape(tape: &mut Tape, enc: &TapeEncode) -> Var {
    let mut sums = Vec::with_capacity(enc.mus.len());
    for (&mu, &pre) in enc.mus.iter().zip(&enc.sigma_pres) {
        let mu2 = tape.mul(mu, mu);
        let two_pre = tape.affine(pre, 2.0, 0.0);
        let sigma2 = tape.exp(two_pre);
        let rest = tape.affine(pre, -2.0, -1.0);
        let inner = tape.add_n(vec![mu2, sigma2, rest]);
        sums.push(tape.sum_elems(inner));
    }
    let total = tape.add_n(sums);
    tape.affine(total, 0.5, 0.0)
}

/// z_v = μ_v + σ_v ∘ ξ_v with fixed noise (the reparameterization trick).
pub(crate) fn sample_z_tape(tape: &mut Tape, enc: &TapeEncode, xi: &[Vec<f64>]) -> Vec<Var> {
    enc.mus
        .iter()
        .zip(&enc.sigma_pres)
        .zip(xi)
        .map(|((&mu, &pre), noise)| {
            let sigma = tape.exp(pre);
            let eps = tape.constant(noise);
            let scaled = tape.mul(sigma, eps);
            tape.add(mu, scaled)
        })
        .collect()
}

pub(crate) fn label_loss_tape(
    tape: &mut Tape,
    zs: &[Var],
    labels: &[usize],
    params: &ModelParams,
) -> Var {
    let mut terms = Vec::with_capacity(zs.len());
    for (&z, &label) in zs.iter().zip(labels) {
        let scores = tape.matvec(
            params.layout.label_w.clone(),
            Some(params.layout.label_b.clone()),
            z,
        );
        let lse = tape.logsumexp_vec(scores);
        let truth = tape.index(scores, label);
        terms.push(tape.sub(lse, truth));
    }
    tape.add_n(terms)
}

pub(crate) fn property_tape(tape: &mut Tape, zs: &[Var], params: &ModelParams) -> Var {
    let mut terms = Vec::with_capacity(zs.len());
    for &z in zs {
        let gate_lin = tape.matvec(params.layout.g1_w.clone(), Some(params.layout.g1_b.clone()), z);
        let gate = tape.sigmoid(gate_lin);
        let value = tape.matvec(params.layout.g2_w.clone(), Some(params.layout.g2_b.clone()), z);
        terms.push(tape.mul(gate, value));
    }
    tape.add_n(terms)
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Var {
    let sum = tape.add_n(vars.to_vec());
    tape.affine(sum, 1.0 / vars.len() as f64, 0.0)
}

/// Decoder initial states on tape: h_v(0) = tanh(W [z_v ‖ one-hot] + b).
pub(crate) fn decoder_init_tape(
    tape: &mut Tape,
    zs: &[Var],
    labels: &[usize],
    params: &ModelParams,
) -> Vec<Var> {
    let vocab_len = params.vocab.len();
    zs.iter()
        .zip(labels)
        .map(|(&z, &label)| {
            let onehot = tape.constant(&one_hot(label, vocab_len));
            let zin = tape.concat(vec![z, onehot]);
            let lin = tape.matvec(
                params.layout.dec_init_w.clone(),
                Some(params.layout.dec_init_b.clone()),
                zin,
            );
            tape.tanh(lin)
        })
        .collect()
}

fn trace_log_prob_tape(
    tape: &mut Tape,
    trace: &GenerationTrace,
    graph: &MolecularGraph,
    spec: &LatentSpec,
    h0: &[Var],
    h_init_var: Var,
    params: &ModelParams,
) -> Result<Var, TrainError> {
    let mut state = replay_state(graph, spec, params, trace.first_focus)?;
    let mut current: Vec<Var> = h0.to_vec();
    let mut terms = vec![tape.scalar(-(trace.atoms as f64).ln())];

    for step in &trace.steps {
        let v = state.focus().ok_or(TrainError::TraceCorrupt("queue exhausted early"))?;
        if v != step.focus {
            return Err(TrainError::TraceCorrupt("focus order mismatch"));
        }
        let masks = compute_masks(&state, v)?;
        let targets: Vec<usize> = (0..state.graph.atom_count())
            .filter(|&u| masks.edge[u])
            .collect();
        let h_t = mean_of(tape, &current);

        let stop_in = tape.concat(vec![current[v], h_t]);
        let stop_logit = tape.matvec(
            params.layout.stop_w.clone(),
            Some(params.layout.stop_b.clone()),
            stop_in,
        );

        let mut phis = Vec::with_capacity(targets.len());
        let mut logits = Vec::with_capacity(targets.len() + 1);
        for &u in &targets {
            let dvu = tape.scalar(distance_feature(&state.graph, v, u));
            let phi = tape.concat(vec![current[v], current[u], dvu, h_init_var, h_t]);
            logits.push(tape.matvec(
                params.layout.edge_score_w.clone(),
                Some(params.layout.edge_score_b.clone()),
                phi,
            ));
            phis.push(phi);
        }
        logits.push(stop_logit);
        let lse = tape.logsumexp(logits.clone());

        match step.action {
            TraceAction::Edge { target, order } => {
                let pos = targets.iter().position(|&u| u == target).ok_or(
                    TrainError::MaskedAction { focus: v, target, order },
                )?;
                if !masks.label[target][(order - 1) as usize] {
                    return Err(TrainError::MaskedAction { focus: v, target, order });
                }
                let lp_target = tape.sub(logits[pos], lse);
                let allowed: Vec<u8> =
                    (1..=3).filter(|&l| masks.label[target][(l - 1) as usize]).collect();
                let order_logits: Vec<Var> = allowed
                    .iter()
                    .map(|&l| {
                        tape.matvec(
                            params.layout.label_score_w[(l - 1) as usize].clone(),
                            Some(params.layout.label_score_b[(l - 1) as usize].clone()),
                            phis[pos],
                        )
                    })
                    .collect();
                let lse_order = tape.logsumexp(order_logits.clone());
                let order_pos = allowed.iter().position(|&l| l == order).unwrap();
                let lp_order = tape.sub(order_logits[order_pos], lse_order);
                let step_lp = tape.add(lp_target, lp_order);
                terms.push(step_lp);

                state.apply_edge(target, order, params, false)?;
                current = tape.ggnn(&params.layout.dec, state.graph.bonds(), h0.to_vec(), params.steps);
            }
            TraceAction::Stop => {
                let lp_stop = tape.sub(stop_logit, lse);
                terms.push(lp_stop);
                state.apply_stop()?;
            }
        }
    }
    Ok(tape.add_n(terms))
}

pub(crate) fn recon_tape(
    tape: &mut Tape,
    graph: &MolecularGraph,
    traces: &[GenerationTrace],
    zs: &[Var],
    labels: &[usize],
    params: &ModelParams,
) -> Result<Var, TrainError> {
    if traces.is_empty() {
        return Err(TrainError::TraceCorrupt("no traces supplied"));
    }
    // The bookkeeping spec carries the tape-forward z values; masks never
    // read them, they only size the replay state.
    let spec = LatentSpec {
        latents: zs.iter().map(|&z| tape.val(z).to_vec()).collect(),
        labels: labels.to_vec(),
    };
    let h0 = decoder_init_tape(tape, zs, labels, params);
    let h_init_var = mean_of(tape, &h0);

    let mut lps = Vec::with_capacity(traces.len());
    let mut pi_sum = 0.0;
    for trace in traces {
        lps.push(trace_log_prob_tape(
            tape, trace, graph, &spec, &h0, h_init_var, params,
        )?);
        pi_sum += trace.trace_count_estimate();
    }
    let k = traces.len() as f64;
    let sum = tape.add_n(lps);
    let mean = tape.affine(sum, 1.0 / k, 0.0);
    Ok(tape.affine(mean, -1.0, -((pi_sum / k).ln())))
}

/// All loss terms for one graph on one tape.
pub(crate) struct TapeLossParts {
    pub total: Var,
    pub recon_with_label: Var,
    pub latent: Var,
    pub q: Var,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn graph_loss_tape(
    tape: &mut Tape,
    graph: &MolecularGraph,
    traces: &[GenerationTrace],
    xi: &[Vec<f64>],
    target: f64,
    lambda1: f64,
    lambda2: f64,
    params: &ModelParams,
) -> Result<TapeLossParts, TrainError> {
    let labels = graph_labels(graph, params)?;
    let enc = encode_tape(tape, graph, &labels, params);
    let zs = sample_z_tape(tape, &enc, xi);
    let latent = kl_tape(tape, &enc);
    let label_loss = label_loss_tape(tape, &zs, &labels, params);
    let recon = recon_tape(tape, graph, traces, &zs, &labels, params)?;
    let recon_with_label = tape.add(recon, label_loss);

    let r = property_tape(tape, &zs, params);
    let target_var = tape.scalar(target);
    let diff = tape.sub(r, target_var);
    let q = tape.mul(diff, diff);

    let weighted_latent = tape.affine(latent, lambda1, 0.0);
    let weighted_q = tape.affine(q, lambda2, 0.0);
    let total = tape.add_n(vec![recon_with_label, weighted_latent, weighted_q]);
    Ok(TapeLossParts {
        total,
        recon_with_label,
        latent,
        q,
    })
}

// ---- per-term gradients (diagnostics and gradient checking) --------------

/// KL of the encoder posterior, differentiated through the encoder.
pub fn kl_with_grad(graph: &MolecularGraph, params: &ModelParams) -> Result<(f64, Vec<f64>), TrainError> {
    let labels = graph_labels(graph, params)?;
    let mut tape = Tape::new(&params.flat);
    let enc = encode_tape(&mut tape, graph, &labels, params);
    let kl = kl_tape(&mut tape, &enc);
    let grads = tape.backward(kl);
    Ok((tape.scalar_val(kl), grads.param))
}

/// Node-label negative log likelihood at fixed latents.
pub fn label_loss_with_grad(
    graph: &MolecularGraph,
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<(f64, Vec<f64>), TrainError> {
    let labels = graph_labels(graph, params)?;
    let mut tape = Tape::new(&params.flat);
    let zs: Vec<Var> = z.iter().map(|zv| tape.input(zv)).collect();
    let loss = label_loss_tape(&mut tape, &zs, &labels, params);
    let grads = tape.backward(loss);
    Ok((tape.scalar_val(loss), grads.param))
}

/// Log-probability of one trace at fixed latents, with its parameter
/// gradient.
pub fn trace_log_prob_with_grad(
    trace: &GenerationTrace,
    graph: &MolecularGraph,
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<(f64, Vec<f64>), TrainError> {
    let labels = graph_labels(graph, params)?;
    let spec = LatentSpec {
        latents: z.to_vec(),
        labels: labels.clone(),
    };
    let mut tape = Tape::new(&params.flat);
    let zs: Vec<Var> = z.iter().map(|zv| tape.input(zv)).collect();
    let h0 = decoder_init_tape(&mut tape, &zs, &labels, params);
    let h_init_var = mean_of(&mut tape, &h0);
    let lp = trace_log_prob_tape(&mut tape, trace, graph, &spec, &h0, h_init_var, params)?;
    let grads = tape.backward(lp);
    Ok((tape.scalar_val(lp), grads.param))
}

/// Monte-Carlo reconstruction loss at fixed latents, with its parameter
/// gradient.
pub fn recon_loss_with_grad(
    graph: &MolecularGraph,
    traces: &[GenerationTrace],
    z: &[Vec<f64>],
    params: &ModelParams,
) -> Result<(f64, Vec<f64>), TrainError> {
    let labels = graph_labels(graph, params)?;
    let mut tape = Tape::new(&params.flat);
    let zs: Vec<Var> = z.iter().map(|zv| tape.input(zv)).collect();
    let loss = recon_tape(&mut tape, graph, traces, &zs, &labels, params)?;
    let grads = tape.backward(loss);
    Ok((tape.scalar_val(loss), grads.param))
}

/// Gated regression score at fixed latents, with its parameter gradient.
pub fn property_score_with_grad(
    z: &[Vec<f64>],
    params: &ModelParams,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new(&params.flat);
    let zs: Vec<Var> = z.iter().map(|zv| tape.input(zv)).collect();
    let r = property_tape(&mut tape, &zs, params);
    let grads = tape.backward(r);
    (tape.scalar_val(r), grads.param)
}

/// Squared property-target distance through the encoder and the
/// reparameterized sample, with its parameter gradient.
pub fn q_loss_with_grad(
    graph: &MolecularGraph,
    xi: &[Vec<f64>],
    target: f64,
    params: &ModelParams,
) -> Result<(f64, Vec<f64>), TrainError> {
    let labels = graph_labels(graph, params)?;
    let mut tape = Tape::new(&params.flat);
    let enc = encode_tape(&mut tape, graph, &labels, params);
    let zs = sample_z_tape(&mut tape, &enc, xi);
    let r = property_tape(&mut tape, &zs, params);
    let target_var = tape.scalar(target);
    let diff = tape.sub(r, target_var);
    let q = tape.mul(diff, diff);
    let grads = tape.backward(q);
    Ok((tape.scalar_val(q), grads.param))
}

/// Stochastic-gradient training of the full objective. Deterministic for a
/// given seed: the dataset order is fixed and all sampling comes from one
/// seeded stream. Property targets default to the fitness surrogate.
pub fn train(
    dataset: &[MolecularGraph],
    targets: Option<&[f64]>,
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(t) = targets {
        if t.len() != dataset.len() {
            return Err(TrainError::TargetCount {
                expected: dataset.len(),
                got: t.len(),
            });
        }
    }
    let resolved_targets: Vec<f64> = match targets {
        Some(t) => t.to_vec(),
        None => dataset
            .iter()
            .map(|g| fitness::surrogate_score(g).map_err(TrainError::from))
            .collect::<Result<_, _>>()?,
    };

    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Common random numbers across epochs: the sampled traces and the
        // reparameterization noise form one fixed Monte-Carlo approximation
        // of the objective, so the per-epoch log reflects pure descent.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (gi, graph) in dataset.iter().enumerate() {
            let traces = extract_traces(graph, cfg.traces_per_graph, &mut rng)?;
            let xi: Vec<Vec<f64>> = (0..graph.atom_count())
                .map(|_| (0..params.d).map(|_| standard_normal(&mut rng)).collect())
                .collect();
            let (total, grad, parts_vals) = {
                let mut tape = Tape::new(&params.flat);
                let parts = graph_loss_tape(
                    &mut tape,
                    graph,
                    &traces,
                    &xi,
                    resolved_targets[gi],
                    cfg.lambda1,
                    cfg.lambda2,
                    &params,
                )?;
                let total = tape.scalar_val(parts.total);
                let vals = (
                    tape.scalar_val(parts.recon_with_label),
                    tape.scalar_val(parts.latent),
                    tape.scalar_val(parts.q),
                );
                let grads = tape.backward(parts.total);
                (total, grads.param, vals)
            };
            if !total.is_finite() {
                return Err(TrainError::NonFinite { epoch, graph: gi });
            }
            for (p, g) in params.flat.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            sums.0 += total;
            sums.1 += parts_vals.0;
            sums.2 += parts_vals.1;
            sums.3 += parts_vals.2;
        }
        let n = dataset.len() as f64;
        stats.push(EpochStats {
            epoch,
            total: sums.0 / n,
            recon: sums.1 / n,
            latent: sums.2 / n,
            q: sums.3 / n,
        });
    }
    Ok((params, stats))
}
