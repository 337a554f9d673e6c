//! Configuration, dataset ingestion, stage orchestration and the CLI.
//!
//! Stages are ingest → train → generate → evolve → report; each one reads
//! only the persisted outputs of its predecessors, so any stage can be
//! re-run on its own. One root seed fans out to per-stage seeds, making the
//! whole run a pure function of the config and input files.

use crate::fitness::{
    render_rank_table, rank_report, DockingBackend, DockingCommand, ExternalBackend,
    FitnessEngine, FitnessRecord, FitnessWeights, SurrogateBackend,
};
use crate::ga::{self, GaConfig, Individual, PopulationSource};
use crate::generator::{self, LatentSpec};
use crate::molgraph::{fnv1a64, MolecularGraph, ValencyTable};
use crate::neural::{ModelParams, DEFAULT_GGNN_STEPS, DEFAULT_HIDDEN_DIM};
use crate::smiles;
use crate::trainer::{self, EpochStats, TrainConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("config key {0} is required here")]
    MissingKey(&'static str),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("another instance holds the lock file {0}")]
    Locked(PathBuf),
    #[error("missing artifact {path:?}: run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: &'static str },
    #[error("ingestion kept zero records")]
    EmptyIngest,
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

// ---- configuration -------------------------------------------------------

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Dataset path, or "@demo-corpus" for the bundled corpus.
    pub dataset: String,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub neural: NeuralSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub ga: GaSection,
    #[serde(default)]
    pub fitness: FitnessSection,
    #[serde(default)]
    pub docking: Option<DockingSection>,
    #[serde(default)]
    pub ingest: IngestSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NeuralSection {
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_ggnn_steps")]
    pub ggnn_steps: usize,
}

fn default_hidden_dim() -> usize {
    DEFAULT_HIDDEN_DIM
}
fn default_ggnn_steps() -> usize {
    DEFAULT_GGNN_STEPS
}

impl Default for NeuralSection {
    fn default() -> Self {
        NeuralSection {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            ggnn_steps: DEFAULT_GGNN_STEPS,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    #[serde(default)]
    pub ascent_steps: usize,
    #[serde(default = "default_ascent_step_size")]
    pub ascent_step_size: f64,
}

fn default_max_nodes() -> usize {
    40
}
fn default_ascent_step_size() -> f64 {
    0.05
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            max_nodes: 40,
            ascent_steps: 0,
            ascent_step_size: 0.05,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "default_traces")]
    pub traces_per_graph: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lambda1() -> f64 {
    0.3
}
fn default_lambda2() -> f64 {
    10.0
}
fn default_traces() -> usize {
    4
}
fn default_lr() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    20
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            lambda1: 0.3,
            lambda2: 10.0,
            traces_per_graph: 4,
            learning_rate: 0.01,
            epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GaSection {
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_generations")]
    pub generations: usize,
    #[serde(default = "default_elite")]
    pub elite_fraction: f64,
    #[serde(default = "default_random")]
    pub random_fraction: f64,
    #[serde(default = "default_uppermost")]
    pub uppermost_max_atoms: usize,
    #[serde(default)]
    pub literal_pool_selection: bool,
}

fn default_population() -> usize {
    100
}
fn default_generations() -> usize {
    20
}
fn default_elite() -> f64 {
    0.25
}
fn default_random() -> f64 {
    0.25
}
fn default_uppermost() -> usize {
    2
}

impl Default for GaSection {
    fn default() -> Self {
        GaSection {
            population: 100,
            generations: 20,
            elite_fraction: 0.25,
            random_fraction: 0.25,
            uppermost_max_atoms: 2,
            literal_pool_selection: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FitnessSection {
    #[serde(default = "default_w_affinity")]
    pub w_affinity: f64,
    #[serde(default = "default_w_validity")]
    pub w_validity: f64,
    #[serde(default = "default_w_size")]
    pub w_size: f64,
    #[serde(default = "default_size_threshold")]
    pub size_threshold: usize,
    #[serde(default = "default_backend")]
    pub backend: String,
}

fn default_w_affinity() -> f64 {
    1.0
}
fn default_w_validity() -> f64 {
    1.0
}
fn default_w_size() -> f64 {
    0.05
}
fn default_size_threshold() -> usize {
    60
}
fn default_backend() -> String {
    "surrogate".to_string()
}

impl Default for FitnessSection {
    fn default() -> Self {
        FitnessSection {
            w_affinity: 1.0,
            w_validity: 1.0,
            w_size: 0.05,
            size_threshold: 60,
            backend: "surrogate".to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DockingSection {
    pub binary: Option<PathBuf>,
    pub receptor: Option<PathBuf>,
    #[serde(default)]
    pub args_template: Vec<String>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    /// Records with an activity value above this are quarantined.
    #[serde(default)]
    pub activity_threshold: Option<f64>,
    #[serde(default = "default_max_atoms")]
    pub max_atoms: usize,
}

fn default_max_atoms() -> usize {
    60
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            activity_threshold: None,
            max_atoms: 60,
        }
    }
}

const DEMO_CONFIG: &str = include_str!("../configs/demo.toml");
const DEMO_CORPUS: &str = include_str!("../data/demo_corpus.smi");

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a path, or the embedded demo configuration for the literal
    /// argument "demo".
    pub fn load(spec: &str) -> Result<Self, PipelineError> {
        if spec == "demo" {
            return Self::from_toml(DEMO_CONFIG);
        }
        let text = std::fs::read_to_string(spec).map_err(|e| {
            PipelineError::Config(format!("cannot read config {spec:?}: {e}"))
        })?;
        Self::from_toml(&text)
    }

    pub fn demo() -> Self {
        Self::from_toml(DEMO_CONFIG).expect("embedded demo config is valid")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.neural.hidden_dim == 0 {
            return Err(PipelineError::Config("neural.hidden_dim must be ≥ 1".into()));
        }
        if self.ga.population < 2 || self.ga.population % 2 != 0 {
            return Err(PipelineError::Config(
                "ga.population must be even and ≥ 2".into(),
            ));
        }
        if self.trainer.lambda1 < 0.0 || self.trainer.lambda2 < 0.0 {
            return Err(PipelineError::Config("trainer lambdas must be ≥ 0".into()));
        }
        if self.generator.max_nodes == 0 {
            return Err(PipelineError::Config("generator.max_nodes must be ≥ 1".into()));
        }
        match self.fitness.backend.as_str() {
            "surrogate" => {}
            "external" => {
                let docking = self
                    .docking
                    .as_ref()
                    .ok_or(PipelineError::MissingKey("docking"))?;
                if docking.binary.is_none() {
                    return Err(PipelineError::MissingKey("docking.binary"));
                }
                if docking.receptor.is_none() {
                    return Err(PipelineError::MissingKey("docking.receptor"));
                }
            }
            other => {
                return Err(PipelineError::Config(format!(
                    "fitness.backend must be \"surrogate\" or \"external\", got {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda1: self.trainer.lambda1,
            lambda2: self.trainer.lambda2,
            traces_per_graph: self.trainer.traces_per_graph,
            learning_rate: self.trainer.learning_rate,
            epochs: self.trainer.epochs,
            seed,
        }
    }

    pub fn ga_config(&self, seed: u64) -> GaConfig {
        GaConfig {
            population: self.ga.population,
            generations: self.ga.generations,
            uppermost_max_atoms: self.ga.uppermost_max_atoms,
            elite_fraction: self.ga.elite_fraction,
            random_fraction: self.ga.random_fraction,
            literal_pool_selection: self.ga.literal_pool_selection,
            seed,
        }
    }

    pub fn weights(&self) -> FitnessWeights {
        FitnessWeights {
            w_affinity: self.fitness.w_affinity,
            w_validity: self.fitness.w_validity,
            w_size: self.fitness.w_size,
            size_threshold: self.fitness.size_threshold,
        }
    }

    pub fn engine(&self) -> Result<FitnessEngine, PipelineError> {
        let backend: Box<dyn DockingBackend> = match self.fitness.backend.as_str() {
            "surrogate" => Box::new(SurrogateBackend),
            "external" => {
                let docking = self
                    .docking
                    .as_ref()
                    .ok_or(PipelineError::MissingKey("docking"))?;
                Box::new(ExternalBackend::new(DockingCommand {
                    binary: docking
                        .binary
                        .clone()
                        .ok_or(PipelineError::MissingKey("docking.binary"))?,
                    receptor: docking
                        .receptor
                        .clone()
                        .ok_or(PipelineError::MissingKey("docking.receptor"))?,
                    args_template: docking.args_template.clone(),
                }))
            }
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown fitness backend {other:?}"
                )))
            }
        };
        Ok(FitnessEngine::new(self.weights(), backend))
    }

    fn dataset_text(&self) -> Result<String, PipelineError> {
        if self.dataset == "@demo-corpus" {
            return Ok(DEMO_CORPUS.to_string());
        }
        std::fs::read_to_string(&self.dataset).map_err(|e| {
            PipelineError::Config(format!("cannot read dataset {:?}: {e}", self.dataset))
        })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-stage seed derived from the root seed, so each stage is
/// independently reproducible.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    splitmix64(root ^ fnv1a64(stage.as_bytes()))
}

// ---- ingestion ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub smiles: String,
    pub activity: Option<f64>,
    pub line: usize,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub kept: Vec<(DatasetRecord, MolecularGraph)>,
    pub quarantined: Vec<(DatasetRecord, String)>,
}

/// Parse a dataset ("SMILES[\tactivity]" per line, '#' comments ignored):
/// keep records that parse, validate, fit the atom budget and pass the
/// activity filter; deduplicate by canonical key. Input order is preserved
/// and every record lands in exactly one of the two output lists.
pub fn ingest(text: &str, cfg: &IngestSection, table: &ValencyTable) -> IngestOutcome {
    let mut kept: Vec<(DatasetRecord, MolecularGraph)> = Vec::new();
    let mut quarantined = Vec::new();
    let mut seen = std::collections::BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut parts = content.splitn(2, '\t');
        let smiles_text = parts.next().unwrap_or_default().trim().to_string();
        let activity_text = parts.next().map(str::trim);
        let activity = match activity_text {
            None | Some("") => None,
            Some(t) => match t.parse::<f64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    quarantined.push((
                        DatasetRecord {
                            smiles: smiles_text,
                            activity: None,
                            line,
                        },
                        format!("unparseable activity {t:?}"),
                    ));
                    continue;
                }
            },
        };
        let record = DatasetRecord {
            smiles: smiles_text,
            activity,
            line,
        };
        let graph = match smiles::parse(&record.smiles, table) {
            Ok(g) => g,
            Err(e) => {
                quarantined.push((record, e.to_string()));
                continue;
            }
        };
        let report = graph.validate();
        if !report.ok {
            let msgs: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
            quarantined.push((record, msgs.join("; ")));
            continue;
        }
        if graph.atom_count() > cfg.max_atoms {
            quarantined.push((
                record,
                format!("{} atoms exceed the limit of {}", graph.atom_count(), cfg.max_atoms),
            ));
            continue;
        }
        if let (Some(threshold), Some(value)) = (cfg.activity_threshold, record.activity) {
            if value > threshold {
                quarantined.push((
                    record,
                    format!("activity {value} above threshold {threshold}"),
                ));
                continue;
            }
        }
        let key = graph.canonical_key();
        if let Some(first_line) = seen.get(&key) {
            quarantined.push((record, format!("duplicate of line {first_line}")));
            continue;
        }
        seen.insert(key, line);
        kept.push((record, graph));
    }
    IngestOutcome { kept, quarantined }
}

// ---- artifact paths and persistence ----------------------------------------

pub struct Artifacts {
    pub out_dir: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: &Path) -> Self {
        Artifacts {
            out_dir: out_dir.to_path_buf(),
        }
    }
    pub fn kept(&self) -> PathBuf {
        self.out_dir.join("kept.smi")
    }
    pub fn quarantine(&self) -> PathBuf {
        self.out_dir.join("quarantine.tsv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.out_dir.join("checkpoint.bin")
    }
    pub fn training_log(&self) -> PathBuf {
        self.out_dir.join("training.log")
    }
    pub fn generated(&self) -> PathBuf {
        self.out_dir.join("generated.smi")
    }
    pub fn population(&self) -> PathBuf {
        self.out_dir.join("population_final.smi")
    }
    pub fn evolution_log(&self) -> PathBuf {
        self.out_dir.join("evolution.log")
    }
    pub fn report(&self) -> PathBuf {
        self.out_dir.join("report.tsv")
    }
}

/// Single-instance lock per output directory; released on drop.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(out_dir: &Path) -> Result<Lock, PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".gcgvae.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// SMILES-per-line population file with a comment header carrying
/// generation metadata.
fn write_population(
    path: &Path,
    header: &str,
    rows: &[String],
) -> Result<(), PipelineError> {
    let mut text = String::new();
    text.push_str(&format!("# {header}\n"));
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_population(path: &Path, table: &ValencyTable, hint: &'static str) -> Result<Vec<MolecularGraph>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            hint,
        });
    }
    let text = std::fs::read_to_string(path)?;
    let mut graphs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let smiles_text = line.split('\t').next().unwrap_or_default();
        let graph = smiles::parse(smiles_text, table).map_err(stage_err("read-population"))?;
        graphs.push(graph);
    }
    Ok(graphs)
}

// ---- stages ----------------------------------------------------------------

pub fn run_ingest(cfg: &PipelineConfig, table: &ValencyTable) -> Result<IngestOutcome, PipelineError> {
    let text = cfg.dataset_text()?;
    let outcome = ingest(&text, &cfg.ingest, table);
    if outcome.kept.is_empty() {
        return Err(PipelineError::EmptyIngest);
    }
    let artifacts = Artifacts::new(&cfg.out_dir);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let rows: Vec<String> = outcome
        .kept
        .iter()
        .map(|(r, _)| match r.activity {
            Some(a) => format!("{}\t{a}", r.smiles),
            None => r.smiles.clone(),
        })
        .collect();
    write_population(
        &artifacts.kept(),
        &format!("kept records: {}", rows.len()),
        &rows,
    )?;
    let mut quarantine_text = String::from("line\tsmiles\treason\n");
    for (record, reason) in &outcome.quarantined {
        quarantine_text.push_str(&format!("{}\t{}\t{}\n", record.line, record.smiles, reason));
    }
    std::fs::write(artifacts.quarantine(), quarantine_text)?;
    Ok(outcome)
}

pub fn run_train(cfg: &PipelineConfig, table: &ValencyTable) -> Result<(ModelParams, Vec<EpochStats>), PipelineError> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let graphs = read_population(&artifacts.kept(), table, "ingest")?;
    if graphs.is_empty() {
        return Err(PipelineError::EmptyIngest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "params"));
    let initial = ModelParams::init(
        cfg.neural.hidden_dim,
        cfg.neural.ggnn_steps,
        table.vocabulary(),
        &mut rng,
    );
    let train_cfg = cfg.train_config(stage_seed(cfg.seed, "train"));
    let (params, stats) =
        trainer::train(&graphs, None, initial, &train_cfg).map_err(stage_err("train"))?;
    params.save(&artifacts.checkpoint()).map_err(stage_err("train"))?;
    let mut log = String::from(EpochStats::log_header());
    log.push('\n');
    for s in &stats {
        log.push_str(&s.log_line());
        log.push('\n');
    }
    std::fs::write(artifacts.training_log(), log)?;
    Ok((params, stats))
}

fn load_or_init_params(cfg: &PipelineConfig, table: &ValencyTable) -> Result<ModelParams, PipelineError> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let path = artifacts.checkpoint();
    if path.exists() {
        return ModelParams::load(&path, table.vocabulary()).map_err(stage_err("generate"));
    }
    eprintln!(
        "note: no checkpoint at {:?}; generating from freshly initialized parameters",
        path
    );
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "params"));
    Ok(ModelParams::init(
        cfg.neural.hidden_dim,
        cfg.neural.ggnn_steps,
        table.vocabulary(),
        &mut rng,
    ))
}

/// Generate candidate molecules, optionally pushing each latent set uphill
/// on the property head before decoding.
pub fn generate_candidates(
    params: &ModelParams,
    cfg: &PipelineConfig,
    table: &ValencyTable,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MolecularGraph>, PipelineError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let graph = if cfg.generator.ascent_steps == 0 {
            generator::generate(params, table, cfg.generator.max_nodes, rng)
                .map_err(stage_err("generate"))?
        } else {
            let spec0 = generator::sample_latents(params, cfg.generator.max_nodes, rng);
            let ascended = trainer::latent_ascend(
                &spec0.latents,
                params,
                cfg.generator.ascent_steps,
                cfg.generator.ascent_step_size,
            );
            let labels = ascended
                .iter()
                .map(|z| generator::argmax_label(&generator::label_scores(params, z)))
                .collect();
            let spec = LatentSpec {
                latents: ascended,
                labels,
            };
            let mut state = generator::init_nodes(
                params,
                table,
                cfg.generator.max_nodes,
                rng,
                Some(spec),
            )
            .map_err(stage_err("generate"))?;
            while state.focus().is_some() {
                generator::decode_step(&mut state, params, rng).map_err(stage_err("generate"))?;
            }
            generator::extract_component(&state.graph, state.first_focus, table)
        };
        debug_assert!(graph.validate().ok);
        out.push(graph);
    }
    Ok(out)
}

pub fn run_generate(
    cfg: &PipelineConfig,
    table: &ValencyTable,
    count: usize,
) -> Result<Vec<MolecularGraph>, PipelineError> {
    let params = load_or_init_params(cfg, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "generate"));
    let candidates = generate_candidates(&params, cfg, table, count, &mut rng)?;
    let artifacts = Artifacts::new(&cfg.out_dir);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let rows: Vec<String> = candidates
        .iter()
        .map(|g| smiles::write(g).map_err(stage_err("generate")))
        .collect::<Result<_, _>>()?;
    write_population(
        &artifacts.generated(),
        &format!("generated candidates: {count}"),
        &rows,
    )?;
    Ok(candidates)
}

pub fn run_evolve(
    cfg: &PipelineConfig,
    table: &ValencyTable,
) -> Result<Vec<Individual>, PipelineError> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let seeds = read_population(&artifacts.generated(), table, "generate")?;
    let engine = cfg.engine()?;
    let ga_cfg = cfg.ga_config(stage_seed(cfg.seed, "evolve"));
    let mut rng = ChaCha8Rng::seed_from_u64(ga_cfg.seed);
    let population = ga::init_population(
        &PopulationSource::Graphs(&seeds),
        ga_cfg.population,
        &mut rng,
    )
    .map_err(stage_err("evolve"))?;
    let (final_pop, stats) =
        ga::run_ga(population, &ga_cfg, &engine, &mut rng).map_err(stage_err("evolve"))?;

    let mut log = String::from(ga::GenStats::log_header());
    log.push('\n');
    for s in &stats {
        log.push_str(&s.log_line());
        log.push('\n');
    }
    std::fs::write(artifacts.evolution_log(), log)?;

    let mut rows: Vec<String> = Vec::with_capacity(final_pop.len());
    for ind in &final_pop {
        let text = smiles::write(&ind.graph).map_err(stage_err("evolve"))?;
        rows.push(format!("{text}\t{:.6}", ind.composite()));
    }
    write_population(
        &artifacts.population(),
        &format!(
            "generation {} population: {}",
            cfg.ga.generations,
            final_pop.len()
        ),
        &rows,
    )?;
    Ok(final_pop)
}

/// Build the final ranked report from a population file: deduplicate by
/// canonical key, score, rank by affinity.
pub fn run_report(cfg: &PipelineConfig, table: &ValencyTable) -> Result<String, PipelineError> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let graphs = read_population(&artifacts.population(), table, "evolve")?;
    let engine = cfg.engine()?;

    let mut seen = std::collections::BTreeSet::new();
    let mut scored: Vec<(String, MolecularGraph, FitnessRecord)> = Vec::new();
    for graph in graphs {
        let key = graph.canonical_key();
        if !seen.insert(key.clone()) {
            continue;
        }
        let record = engine.score(&graph, &key).map_err(stage_err("report"))?;
        scored.push((key, graph, record));
    }
    // deterministic naming by (affinity, key) rank
    scored.sort_by(|a, b| {
        a.2.affinity_kcal_per_mol
            .total_cmp(&b.2.affinity_kcal_per_mol)
            .then_with(|| a.0.cmp(&b.0))
    });
    let records: Vec<(String, String, FitnessRecord)> = scored
        .iter()
        .enumerate()
        .map(|(i, (_, graph, record))| {
            Ok((
                format!("CAND-{:03}", i + 1),
                smiles::write(graph).map_err(stage_err("report"))?,
                record.clone(),
            ))
        })
        .collect::<Result<_, PipelineError>>()?;
    let table_text = render_rank_table(&rank_report(&records));
    std::fs::write(artifacts.report(), &table_text)?;
    Ok(table_text)
}

/// The whole pipeline: ingest → train → generate 10·N → evolve → report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    cfg.validate()?;
    let _lock = Lock::acquire(&cfg.out_dir)?;
    let table = ValencyTable::standard();
    run_ingest(cfg, &table)?;
    run_train(cfg, &table)?;
    run_generate(cfg, &table, cfg.ga.population * 10)?;
    run_evolve(cfg, &table)?;
    run_report(cfg, &table)
}

// ---- CLI -------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "gcgvae",
    about = "Valency-constrained molecular generation with genetic optimization",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Config file path, or "demo" for the bundled demo configuration.
    #[arg(long, global = true, default_value = "demo")]
    config: String,
    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter the dataset into the working directory.
    Ingest,
    /// Train the generative model on the ingested molecules.
    Train,
    /// Generate candidate molecules from the (trained) model.
    Generate {
        /// Number of molecules to emit; defaults to 10× the GA population.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Evolve the generated candidates with the genetic algorithm.
    Evolve,
    /// Score a SMILES file and print a ranked table.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        /// surrogate | external
        #[arg(long)]
        backend: Option<String>,
    },
    /// Write the final ranked report from the evolved population.
    Report,
    /// Run every stage end to end.
    Run,
}

/// Entry point behind `main`: returns the process exit code
/// (0 success, 1 usage error, 2 stage failure).
pub fn cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.global.config)?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    let table = ValencyTable::standard();
    match cli.command {
        Command::Ingest => {
            let _lock = Lock::acquire(&cfg.out_dir)?;
            let outcome = run_ingest(&cfg, &table)?;
            println!(
                "kept {} records, quarantined {}",
                outcome.kept.len(),
                outcome.quarantined.len()
            );
            Ok(())
        }
        Command::Train => {
            let _lock = Lock::acquire(&cfg.out_dir)?;
            let (_, stats) = run_train(&cfg, &table)?;
            if let Some(last) = stats.last() {
                println!("{}", EpochStats::log_header());
                println!("{}", last.log_line());
            }
            Ok(())
        }
        Command::Generate { count } => {
            let _lock = Lock::acquire(&cfg.out_dir)?;
            let count = count.unwrap_or(cfg.ga.population * 10);
            let candidates = run_generate(&cfg, &table, count)?;
            for graph in &candidates {
                println!("{}", smiles::write(graph).map_err(stage_err("generate"))?);
            }
            Ok(())
        }
        Command::Evolve => {
            let _lock = Lock::acquire(&cfg.out_dir)?;
            let population = run_evolve(&cfg, &table)?;
            println!("final population of {}", population.len());
            Ok(())
        }
        Command::Score { input, backend } => {
            if let Some(b) = backend {
                cfg.fitness.backend = b;
                cfg.validate()?;
            }
            let engine = cfg.engine()?;
            let text = std::fs::read_to_string(&input)?;
            let mut out = String::from("name\tsmiles\taffinity_kcal_per_mol\tcomposite\n");
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let smiles_text = line.split('\t').next().unwrap_or_default();
                let graph =
                    smiles::parse(smiles_text, &table).map_err(stage_err("score"))?;
                let record = engine
                    .score(&graph, &graph.canonical_key())
                    .map_err(stage_err("score"))?;
                out.push_str(&format!(
                    "m{:04}\t{}\t{:.3}\t{:.3}\n",
                    idx + 1,
                    smiles_text,
                    record.affinity_kcal_per_mol,
                    record.composite
                ));
            }
            print!("{out}");
            Ok(())
        }
        Command::Report => {
            let _lock = Lock::acquire(&cfg.out_dir)?;
            let table_text = run_report(&cfg, &table)?;
            print!("{table_text}");
            Ok(())
        }
        Command::Run => {
            let report = run_pipeline(&cfg)?;
            print!("{report}");
            Ok(())
        }
    }
}
