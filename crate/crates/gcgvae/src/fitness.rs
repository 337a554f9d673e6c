//! Composite fitness scoring with a pluggable docking backend.
//!
//! The composite score weighs binding affinity (negative kcal/mol, lower is
//! stronger), a validity gate, and a size penalty for molecules that would
//! be hard to synthesize. Two backends ship: a deterministic surrogate so
//! tests and desk runs need no external program, and an adapter that shells
//! out to a user-configured docking command and parses its result table.

use crate::molgraph::MolecularGraph;
use crate::smiles;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("molecule failed validation: {0}")]
    InvalidMolecule(String),
    #[error("docking backend unavailable: {0}")]
    Unavailable(String),
    #[error("docking run failed for molecule {key}: {message}")]
    DockingFailed { key: String, message: String },
    #[error("could not parse docking output for molecule {key}; raw output:\n{raw}")]
    UnparseableOutput { key: String, raw: String },
    #[error(transparent)]
    Smiles(#[from] smiles::SmilesError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Scoring weights and the size threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessWeights {
    pub w_affinity: f64,
    pub w_validity: f64,
    pub w_size: f64,
    /// Heavy-atom count above which the size penalty starts.
    pub size_threshold: usize,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        FitnessWeights {
            w_affinity: 1.0,
            w_validity: 1.0,
            w_size: 0.05,
            size_threshold: 60,
        }
    }
}

/// Scored outcome for one molecule. Invalid molecules carry a rejection
/// composite that sorts below every valid one.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessRecord {
    pub affinity_kcal_per_mol: f64,
    pub validity: bool,
    pub size_penalty: f64,
    pub composite: f64,
    pub backend: String,
}

/// Composite sort key for rejected molecules: below any finite score.
pub const REJECT: f64 = f64::NEG_INFINITY;

pub trait DockingBackend: Send + Sync {
    fn id(&self) -> &str;
    /// Identical scores for canonical-key-equal graphs when deterministic.
    fn is_deterministic(&self) -> bool;
    fn requires_external_binary(&self) -> bool;
    fn score(&self, graph: &MolecularGraph) -> Result<f64, FitnessError>;
}

/// Deterministic pseudo-affinity: an openly artificial stand-in whose only
/// contract is determinism, boundedness, and sensitivity to size, rings and
/// heteroatoms so the genetic algorithm has a gradient to climb.
pub fn surrogate_score(graph: &MolecularGraph) -> Result<f64, FitnessError> {
    let report = graph.validate();
    if !report.ok {
        let msgs: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(FitnessError::InvalidMolecule(msgs.join("; ")));
    }
    let heavy = graph.atom_count() as f64;
    let rings = graph.ring_count() as f64;
    let hbond = graph
        .atoms()
        .iter()
        .filter(|a| a.symbol == "N" || a.symbol == "O")
        .count() as f64;
    let raw = -(0.15 * heavy + 0.5 * rings + 0.3 * hbond - 0.02 * heavy * heavy / 50.0);
    Ok(raw.clamp(-15.0, 0.0))
}

/// The surrogate as a backend.
#[derive(Debug, Default)]
pub struct SurrogateBackend;

impl DockingBackend for SurrogateBackend {
    fn id(&self) -> &str {
        "surrogate"
    }
    fn is_deterministic(&self) -> bool {
        true
    }
    fn requires_external_binary(&self) -> bool {
        false
    }
    fn score(&self, graph: &MolecularGraph) -> Result<f64, FitnessError> {
        surrogate_score(graph)
    }
}

/// Configuration for the external docking adapter. The command template is
/// rendered with `{ligand}`, `{receptor}` and `{out}` placeholders; ligand
/// preparation (3D embedding, format conversion) is the template's job.
#[derive(Debug, Clone)]
pub struct DockingCommand {
    pub binary: PathBuf,
    pub receptor: PathBuf,
    /// Arguments, each possibly containing placeholders.
    pub args_template: Vec<String>,
}

/// Adapter around an external docking program. Results are cached by
/// canonical key so repeated scoring of the same molecule never relaunches
/// the subprocess.
pub struct ExternalBackend {
    command: DockingCommand,
    cache: Mutex<HashMap<String, f64>>,
}

impl ExternalBackend {
    pub fn new(command: DockingCommand) -> Self {
        ExternalBackend {
            command,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// First line matching `^\s*1\s+(-?\d+\.\d+)` carries the top-mode
    /// affinity in kcal/mol.
    pub fn parse_affinity(output: &str) -> Option<f64> {
        for line in output.lines() {
            let trimmed = line.trim_start();
            let Some(rest) = trimmed.strip_prefix('1') else {
                continue;
            };
            if !rest.starts_with(char::is_whitespace) {
                continue;
            }
            let token = rest.split_whitespace().next()?;
            if !token.contains('.') {
                continue;
            }
            if let Ok(value) = token.parse::<f64>() {
                return Some(value);
            }
        }
        None
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl DockingBackend for ExternalBackend {
    fn id(&self) -> &str {
        "external"
    }
    fn is_deterministic(&self) -> bool {
        false
    }
    fn requires_external_binary(&self) -> bool {
        true
    }

    fn score(&self, graph: &MolecularGraph) -> Result<f64, FitnessError> {
        let key = graph.canonical_key();
        if let Some(cached) = self.cache.lock().unwrap().get(&key) {
            return Ok(*cached);
        }
        if !self.command.binary.exists() {
            return Err(FitnessError::Unavailable(format!(
                "docking binary {} not found",
                self.command.binary.display()
            )));
        }
        let ligand_smiles = smiles::write(graph)?;
        let dir = tempfile::tempdir()?;
        let ligand_path = dir.path().join("ligand.smi");
        let out_path = dir.path().join("docked.out");
        std::fs::write(&ligand_path, format!("{ligand_smiles}\n"))?;

        let render = |arg: &str| {
            arg.replace("{ligand}", &ligand_path.to_string_lossy())
                .replace("{receptor}", &self.command.receptor.to_string_lossy())
                .replace("{out}", &out_path.to_string_lossy())
        };
        let output = std::process::Command::new(&self.command.binary)
            .args(self.command.args_template.iter().map(|a| render(a)))
            .output()
            .map_err(|e| FitnessError::Unavailable(format!("failed to launch: {e}")))?;
        if !output.status.success() {
            return Err(FitnessError::DockingFailed {
                key,
                message: format!(
                    "exit {:?}: {}",
                    output.status.code(),
                    String::from_utf8_lossy(&output.stderr)
                ),
            });
        }
        let stdout = String::from_utf8_lossy(&output.stdout).to_string();
        let text = if out_path.exists() {
            std::fs::read_to_string(&out_path)?
        } else {
            stdout
        };
        let affinity = Self::parse_affinity(&text).ok_or(FitnessError::UnparseableOutput {
            key: key.clone(),
            raw: text,
        })?;
        self.cache.lock().unwrap().insert(key, affinity);
        Ok(affinity)
    }
}

/// Score one molecule: validity gate, backend affinity, size penalty.
pub fn composite(
    graph: &MolecularGraph,
    weights: &FitnessWeights,
    backend: &dyn DockingBackend,
) -> Result<FitnessRecord, FitnessError> {
    if !graph.validate().ok {
        return Ok(FitnessRecord {
            affinity_kcal_per_mol: f64::NAN,
            validity: false,
            size_penalty: 0.0,
            composite: REJECT,
            backend: backend.id().to_string(),
        });
    }
    let affinity = backend.score(graph)?;
    let heavy = graph.atom_count();
    let size_penalty = heavy.saturating_sub(weights.size_threshold) as f64;
    let composite = weights.w_affinity * (-affinity) + weights.w_validity
        - weights.w_size * size_penalty;
    Ok(FitnessRecord {
        affinity_kcal_per_mol: affinity,
        validity: true,
        size_penalty,
        composite,
        backend: backend.id().to_string(),
    })
}

/// Weights plus a backend plus a canonical-key cache; the scoring façade
/// the genetic algorithm drives.
pub struct FitnessEngine {
    pub weights: FitnessWeights,
    backend: Box<dyn DockingBackend>,
    cache: Mutex<HashMap<String, FitnessRecord>>,
}

impl FitnessEngine {
    pub fn new(weights: FitnessWeights, backend: Box<dyn DockingBackend>) -> Self {
        FitnessEngine {
            weights,
            backend,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn surrogate(weights: FitnessWeights) -> Self {
        FitnessEngine::new(weights, Box::new(SurrogateBackend))
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Score a molecule, serving deterministic backends from the cache.
    pub fn score(&self, graph: &MolecularGraph, key: &str) -> Result<FitnessRecord, FitnessError> {
        if self.backend.is_deterministic() {
            if let Some(hit) = self.cache.lock().unwrap().get(key) {
                return Ok(hit.clone());
            }
        }
        let record = composite(graph, &self.weights, self.backend.as_ref())?;
        if self.backend.is_deterministic() {
            self.cache
                .lock()
                .unwrap()
                .insert(key.to_string(), record.clone());
        }
        Ok(record)
    }
}

/// One row of a ranked report.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRow {
    pub name: String,
    pub smiles: String,
    pub affinity_kcal_per_mol: f64,
}

/// Rank molecules by affinity ascending (strongest binder first); ties are
/// stable by name. Mirrors the virtual-screening table layout:
/// Name, SMILES, Binding Affinity.
pub fn rank_report(records: &[(String, String, FitnessRecord)]) -> Vec<RankedRow> {
    let mut rows: Vec<RankedRow> = records
        .iter()
        .map(|(name, smiles, record)| RankedRow {
            name: name.clone(),
            smiles: smiles.clone(),
            affinity_kcal_per_mol: record.affinity_kcal_per_mol,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.affinity_kcal_per_mol
            .total_cmp(&b.affinity_kcal_per_mol)
            .then_with(|| a.name.cmp(&b.name))
    });
    rows
}

/// Render a ranked report as a tab-separated table with a header.
pub fn render_rank_table(rows: &[RankedRow]) -> String {
    let mut out = String::from("Name\tSMILES\tBindingAffinity\n");
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.1}\n",
            row.name, row.smiles, row.affinity_kcal_per_mol
        ));
    }
    out
}
