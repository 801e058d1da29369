//! Stage graph and executor. Every stage declares the files it reads; the
//! executor refuses stale or missing inputs, skips stages whose inputs and
//! parameters are unchanged, and appends a manifest entry for each run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{BackendKind, PipelineConfig};
use super::manifest::{now_unix, RunManifest, StageEntry};
use crate::bsq::{self, AugmentSources, Bsq};
use crate::data_model::{self, apply_manifest, Corpus, Label, Partition, SplitManifest};
use crate::error::{Error, Result};
use crate::evaluation::audit::{audit, AuditSample};
use crate::evaluation::explain::{explanations_markdown, render_explanations};
use crate::evaluation::metrics::{self, EvalReport};
use crate::features::{self, assemble, BongVocabulary, ExpertBank, FeatureKind, FeatureMatrix, NllfCache};
use crate::llm::{Gateway, HostedBackend, MockBackend, MockSpec, RetryPolicy};
use crate::models::prompting::{prompt_classify, PromptPrediction, Strategy};
use crate::models::{DecisionTree, EncoderClassifier};
use crate::nllfg::{self, NllfgModel};
use crate::selection::{self, SelectionReport};
use crate::util;
use crate::weak_labeler::{self, LabelMode, WeakLabel};

pub const CORPUS: &str = "corpus.jsonl";
pub const SPLIT: &str = "split.json";
pub const PQ_SAMPLE: &str = "bsq/p_q_sample.json";
pub const RAW: &str = "bsq/raw.jsonl";
pub const REVIEW: &str = "bsq/review.csv";
pub const CURATED: &str = "bsq/curated.jsonl";
pub const AUGMENTED: &str = "bsq/augmented.jsonl";
pub const WEAK: &str = "weak_labels/labels.jsonl";
pub const WEAK_FAILURES: &str = "weak_labels/failures.jsonl";
pub const HISTOGRAM: &str = "weak_labels/histogram.csv";
pub const NLLFG_DIR: &str = "nllfg";
pub const MATRIX: &str = "features/matrix.csv";
pub const MATRIX_DESCRIPTORS: &str = "features/matrix.descriptors.json";
pub const BONG_VOCAB: &str = "features/bong_vocabulary.json";
pub const SELECTION: &str = "selection.json";
pub const TREE: &str = "tree.json";
pub const TREE_DOT: &str = "tree.dot";
pub const ENCODER_DIR: &str = "encoder";
pub const EVAL_JSON: &str = "reports/evaluation.json";
pub const EVAL_MD: &str = "reports/evaluation.md";
pub const EXPLAIN_MD: &str = "reports/explanations.md";
pub const EXPLAIN_JSON: &str = "reports/explanations.json";
pub const AUDIT_JSON: &str = "reports/audit.json";
pub const AUDIT_MD: &str = "reports/audit.md";
pub const LLM_CACHE: &str = "cache/llm";
pub const NLLF_CACHE: &str = "cache/nllf";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Split,
    GenBsq,
    CurateImport,
    AugmentBsq,
    WeakLabel,
    TrainNllfg,
    BuildFeatures,
    SelectFeatures,
    TrainTree,
    TrainEncoder,
    Baseline(Strategy),
    Evaluate,
    Explain,
    Audit,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

pub fn baseline_path(s: Strategy) -> String {
    format!("baselines/{}.jsonl", strategy_name(s))
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Vanilla => "vanilla",
        Strategy::Cot => "cot",
        Strategy::SelfAsk => "self-ask",
    }
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Ingest => "ingest".into(),
            Stage::Split => "split".into(),
            Stage::GenBsq => "gen-bsq".into(),
            Stage::CurateImport => "curate-import".into(),
            Stage::AugmentBsq => "augment-bsq".into(),
            Stage::WeakLabel => "weak-label".into(),
            Stage::TrainNllfg => "train-nllfg".into(),
            Stage::BuildFeatures => "build-features".into(),
            Stage::SelectFeatures => "select-features".into(),
            Stage::TrainTree => "train-tree".into(),
            Stage::TrainEncoder => "train-encoder".into(),
            Stage::Baseline(s) => format!("baseline-{}", strategy_name(*s)),
            Stage::Evaluate => "evaluate".into(),
            Stage::Explain => "explain".into(),
            Stage::Audit => "audit".into(),
        }
    }

    fn order(&self) -> usize {
        match self {
            Stage::Ingest => 0,
            Stage::Split => 1,
            Stage::GenBsq => 2,
            Stage::CurateImport => 3,
            Stage::AugmentBsq => 4,
            Stage::WeakLabel => 5,
            Stage::TrainNllfg => 6,
            Stage::BuildFeatures => 7,
            Stage::SelectFeatures => 8,
            Stage::TrainTree => 9,
            Stage::TrainEncoder => 10,
            Stage::Baseline(_) => 11,
            Stage::Evaluate => 12,
            Stage::Explain => 13,
            Stage::Audit => 14,
        }
    }

    /// Run-directory files written by the stage.
    pub fn outputs(&self) -> Vec<String> {
        let v: &[&str] = match self {
            Stage::Ingest => &[CORPUS],
            Stage::Split => &[SPLIT],
            Stage::GenBsq => &[PQ_SAMPLE, RAW, REVIEW],
            Stage::CurateImport => &[CURATED],
            Stage::AugmentBsq => &[AUGMENTED],
            Stage::WeakLabel => &[WEAK, WEAK_FAILURES, HISTOGRAM],
            Stage::TrainNllfg => &[NLLFG_DIR],
            Stage::BuildFeatures => &[MATRIX, MATRIX_DESCRIPTORS, BONG_VOCAB],
            Stage::SelectFeatures => &[SELECTION],
            Stage::TrainTree => &[TREE, TREE_DOT],
            Stage::TrainEncoder => &[ENCODER_DIR],
            Stage::Baseline(s) => return vec![baseline_path(*s)],
            Stage::Evaluate => &[EVAL_JSON, EVAL_MD],
            Stage::Explain => &[EXPLAIN_MD, EXPLAIN_JSON],
            Stage::Audit => &[AUDIT_JSON, AUDIT_MD],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Ok(match s {
            "ingest" => Stage::Ingest,
            "split" => Stage::Split,
            "gen-bsq" => Stage::GenBsq,
            "curate-import" => Stage::CurateImport,
            "augment-bsq" => Stage::AugmentBsq,
            "weak-label" => Stage::WeakLabel,
            "train-nllfg" => Stage::TrainNllfg,
            "build-features" => Stage::BuildFeatures,
            "select-features" => Stage::SelectFeatures,
            "train-tree" => Stage::TrainTree,
            "train-encoder" => Stage::TrainEncoder,
            "evaluate" => Stage::Evaluate,
            "explain" => Stage::Explain,
            "audit" => Stage::Audit,
            other => match other.strip_prefix("baseline-") {
                Some(s) => Stage::Baseline(Strategy::parse(s)?),
                None => return Err(Error::Config(format!("unknown stage `{other}`"))),
            },
        })
    }
}

/// The stage that writes a run-directory path.
pub fn producer(path: &str) -> Option<Stage> {
    let all = [
        Stage::Ingest,
        Stage::Split,
        Stage::GenBsq,
        Stage::CurateImport,
        Stage::AugmentBsq,
        Stage::WeakLabel,
        Stage::TrainNllfg,
        Stage::BuildFeatures,
        Stage::SelectFeatures,
        Stage::TrainTree,
        Stage::TrainEncoder,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Audit,
    ];
    if let Some(s) = path.strip_prefix("baselines/").and_then(|p| p.strip_suffix(".jsonl")) {
        return Strategy::parse(s).ok().map(Stage::Baseline);
    }
    all.into_iter().find(|s| s.outputs().iter().any(|o| o == path))
}

#[derive(Debug, Clone, PartialEq)]
enum Input {
    /// Written by an earlier stage; its hash must match the manifest.
    Internal(String),
    /// Written by an earlier stage but meant to be edited by hand.
    Editable(String),
    /// Used only when present.
    Optional(String),
    External(PathBuf),
}

/// Arguments of the audit stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditArgs {
    pub verdicts: PathBuf,
    pub teacher: String,
    pub student: String,
    /// Student validation score for the compounding check; read from the
    /// trained generator's manifest when absent.
    pub student_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ran,
    UpToDate,
    Planned,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub status: Status,
    pub llm_calls: u64,
    /// Upper bound on backend calls, for dry runs.
    pub estimated_llm_calls: Option<u64>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub run_dir: PathBuf,
    pub dry_run: bool,
    pub force: bool,
    pub audit: Option<AuditArgs>,
    manifest: RunManifest,
    gateway: Option<Gateway>,
    /// Outputs a dry run pretends to have written.
    planned: Vec<String>,
}

#[derive(Default)]
struct Record {
    seeds: BTreeMap<String, u64>,
    notes: BTreeMap<String, serde_json::Value>,
}

impl Record {
    fn note(&mut self, k: &str, v: serde_json::Value) {
        self.notes.insert(k.into(), v);
    }
}

/// Rows of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub model: String,
    pub variant: String,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstentions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub task: String,
    pub test_size: usize,
    pub rows: Vec<EvaluationRow>,
}

pub fn variant_name(kinds: &[FeatureKind]) -> String {
    kinds
        .iter()
        .map(|k| match k {
            FeatureKind::Nllf => "NLLF",
            FeatureKind::Ef => "EF",
            FeatureKind::Bong => "BoNG",
        })
        .collect::<Vec<_>>()
        .join("+")
}

fn gold_indices(c: &Corpus) -> Result<Vec<usize>> {
    c.examples
        .iter()
        .map(|e| {
            e.gold
                .map(Label::index)
                .ok_or_else(|| Error::validation(format!("example `{}` has no gold label", e.id)))
        })
        .collect()
}

fn ids(c: &Corpus) -> Vec<String> {
    c.examples.iter().map(|e| e.id.clone()).collect()
}

fn majority(c: &Corpus) -> Label {
    if c.positive_rate() > 0.5 {
        Label::Positive
    } else {
        Label::Negative
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, run_dir: impl Into<PathBuf>) -> Result<Self> {
        let run_dir = run_dir.into();
        let manifest = RunManifest::open(&run_dir, &cfg.hash())?;
        Ok(Pipeline { cfg, run_dir, dry_run: false, force: false, audit: None, manifest, gateway: None, planned: Vec::new() })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    /// Stages of a full run, in order.
    pub fn full_plan(&self) -> Vec<Stage> {
        let mut v = vec![
            Stage::Ingest,
            Stage::Split,
            Stage::GenBsq,
            Stage::CurateImport,
            Stage::AugmentBsq,
            Stage::WeakLabel,
            Stage::TrainNllfg,
            Stage::BuildFeatures,
            Stage::SelectFeatures,
            Stage::TrainTree,
        ];
        if self.cfg.run.encoder {
            v.push(Stage::TrainEncoder);
        }
        v.extend(self.cfg.run.baselines.iter().map(|&s| Stage::Baseline(s)));
        v.extend([Stage::Evaluate, Stage::Explain]);
        v
    }

    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        let plan = self.full_plan();
        self.run_stages(&plan)
    }

    pub fn run_stages(&mut self, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
        stages.iter().map(|&s| self.run_stage(s)).collect()
    }

    fn ext(&self, p: &Path) -> Input {
        Input::External(self.cfg.resolve(p))
    }

    fn llm_inputs(&self, v: &mut Vec<Input>) {
        if let (BackendKind::Mock, Some(p)) = (self.cfg.llm.backend, &self.cfg.llm.mock_spec) {
            v.push(self.ext(p));
        }
    }

    fn inputs(&self, stage: Stage) -> Vec<Input> {
        let int = |s: &str| Input::Internal(s.to_string());
        let c = &self.cfg;
        let mut v = Vec::new();
        match stage {
            Stage::Ingest => v.push(self.ext(&c.data.corpus)),
            Stage::Split => v.push(int(CORPUS)),
            Stage::GenBsq => {
                v.extend([int(CORPUS), int(SPLIT), self.ext(&c.bsq.generation_template)]);
                self.llm_inputs(&mut v);
            }
            Stage::CurateImport => {
                v.push(int(RAW));
                v.push(match &c.bsq.review {
                    Some(p) => self.ext(p),
                    None => Input::Editable(REVIEW.into()),
                });
            }
            Stage::AugmentBsq => {
                v.extend([int(CURATED), int(RAW)]);
                for p in [&c.bsq.linguistic, &c.bsq.human, &c.bsq.paraphrases].into_iter().flatten() {
                    v.push(self.ext(p));
                }
            }
            Stage::WeakLabel => {
                v.extend([int(CORPUS), int(SPLIT), int(AUGMENTED), self.ext(&c.weak_label.direct_template)]);
                for p in [&c.weak_label.cot_reason_template, &c.weak_label.cot_answer_template].into_iter().flatten() {
                    v.push(self.ext(p));
                }
                self.llm_inputs(&mut v);
            }
            Stage::TrainNllfg => v.extend([int(CORPUS), int(WEAK), int(AUGMENTED)]),
            Stage::BuildFeatures => {
                v.extend([int(CORPUS), int(SPLIT), int(AUGMENTED), int(NLLFG_DIR)]);
                if let Some(p) = &c.features.expert_rules {
                    v.push(self.ext(p));
                }
            }
            Stage::SelectFeatures => v.extend([int(CORPUS), int(SPLIT), int(MATRIX), int(MATRIX_DESCRIPTORS)]),
            Stage::TrainTree => {
                v.extend([int(CORPUS), int(SPLIT), int(MATRIX), int(MATRIX_DESCRIPTORS), int(SELECTION)])
            }
            Stage::TrainEncoder => {
                v.extend([int(CORPUS), int(SPLIT)]);
                if !c.encoder.extra.is_empty() {
                    v.extend([int(MATRIX), int(MATRIX_DESCRIPTORS)]);
                }
            }
            Stage::Baseline(_) => {
                v.extend([int(CORPUS), int(SPLIT)]);
                if let Some(b) = &c.baseline {
                    v.push(self.ext(&b.classify_template));
                    for p in [&b.cot_answer_template, &b.self_ask_template, &b.follow_up_template, &b.final_answer_template]
                        .into_iter()
                        .flatten()
                    {
                        v.push(self.ext(p));
                    }
                }
                self.llm_inputs(&mut v);
            }
            Stage::Evaluate => {
                v.extend([int(CORPUS), int(SPLIT), int(MATRIX), int(MATRIX_DESCRIPTORS), int(TREE)]);
                v.push(Input::Optional(ENCODER_DIR.into()));
                for s in [Strategy::Vanilla, Strategy::Cot, Strategy::SelfAsk] {
                    v.push(Input::Optional(baseline_path(s)));
                }
            }
            Stage::Explain => v.extend([int(CORPUS), int(SPLIT), int(MATRIX), int(MATRIX_DESCRIPTORS), int(TREE)]),
            Stage::Audit => {
                if let Some(a) = &self.audit {
                    v.push(Input::External(a.verdicts.clone()));
                }
                v.push(Input::Optional(NLLFG_DIR.into()));
            }
        }
        v
    }

    fn params_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let llm = json!({"backend": c.llm.backend, "model": c.llm.model, "temperature": c.llm.temperature, "max_tokens": c.llm.max_tokens});
        let v = match stage {
            Stage::Ingest => json!(c.task.schema),
            Stage::Split => json!(c.split),
            Stage::GenBsq => json!([c.task.params.p_q, c.task.seed, c.bsq.per_sample, llm]),
            Stage::CurateImport => json!(null),
            Stage::AugmentBsq => json!(c.bsq.include_raw_pool),
            Stage::WeakLabel => json!([c.task.params.p_l, c.task.seed, c.weak_label.mode, c.weak_label.lexicon, llm]),
            Stage::TrainNllfg => json!([c.nllfg, c.task.seed]),
            Stage::BuildFeatures => json!([c.features.bong, c.task.schema]),
            Stage::SelectFeatures => json!([c.selection, c.task.params.metric_mode]),
            Stage::TrainTree => json!([c.tree_params(), c.selection.kinds]),
            Stage::TrainEncoder => json!([c.encoder.hyper(&c.task.name), c.encoder.extra]),
            Stage::Baseline(s) => json!([c.baseline, strategy_name(s), llm]),
            Stage::Evaluate => json!([c.task.label_names, c.task.params.metric_mode, c.selection.kinds]),
            Stage::Explain => json!(c.task.label_names),
            Stage::Audit => json!([self.audit, c.task.params.metric_mode]),
        };
        util::hash_json(&v)
    }

    /// Hashes the inputs, or reports missing and stale ones.
    fn check_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        let mut missing: Vec<Stage> = Vec::new();
        for input in self.inputs(stage) {
            match input {
                Input::External(p) => {
                    if !p.exists() {
                        return Err(Error::Config(format!("{} needs {}, which does not exist", stage, p.display())));
                    }
                    hashes.insert(p.display().to_string(), util::hash_path(&p)?);
                }
                Input::Optional(rel) => {
                    let p = self.path(&rel);
                    if p.exists() {
                        hashes.insert(rel, util::hash_path(&p)?);
                    }
                }
                Input::Internal(rel) | Input::Editable(rel) if self.planned.contains(&rel) => {
                    hashes.insert(rel, "planned".into());
                }
                Input::Internal(rel) => {
                    if let Some(h) = self.internal_hash(&rel, true, &mut missing)? {
                        hashes.insert(rel, h);
                    }
                }
                Input::Editable(rel) => {
                    if let Some(h) = self.internal_hash(&rel, false, &mut missing)? {
                        hashes.insert(rel, h);
                    }
                }
            }
        }
        if !missing.is_empty() {
            let mut chain = Vec::new();
            for m in missing {
                self.missing_chain(m, &mut chain);
            }
            chain.sort_by_key(|s: &Stage| s.order());
            chain.dedup();
            return Err(Error::MissingStages(chain.iter().map(Stage::name).collect()));
        }
        Ok(hashes)
    }

    /// Hash of a run-directory input; `None` records its producer as missing.
    fn internal_hash(&self, rel: &str, check: bool, missing: &mut Vec<Stage>) -> Result<Option<String>> {
        let p = self.path(rel);
        let prod = producer(rel).expect("internal inputs have producers");
        if !p.exists() {
            missing.push(prod);
            return Ok(None);
        }
        let h = util::hash_path(&p)?;
        if check {
            match self.manifest.recorded_output(rel) {
                Some((_, rec)) if rec == h => {}
                Some((by, _)) => {
                    return Err(Error::Stale {
                        path: p,
                        hint: format!("content differs from what `{by}` recorded; rerun `nllf {by}` to regenerate it"),
                    })
                }
                None => {
                    return Err(Error::Stale { path: p, hint: format!("not recorded in the run manifest; rerun `nllf {prod}`") })
                }
            }
        }
        Ok(Some(h))
    }

    fn missing_chain(&self, stage: Stage, acc: &mut Vec<Stage>) {
        if acc.contains(&stage) {
            return;
        }
        acc.push(stage);
        for input in self.inputs(stage) {
            if let Input::Internal(rel) | Input::Editable(rel) = input {
                if !self.path(&rel).exists() && !self.planned.contains(&rel) {
                    if let Some(p) = producer(&rel) {
                        self.missing_chain(p, acc);
                    }
                }
            }
        }
    }

    fn up_to_date(&self, stage: Stage, params: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Some(e) = self.manifest.latest(&stage.name()) else { return false };
        if e.params_hash != params || &e.inputs != inputs || inputs.values().any(|h| h == "planned") {
            return false;
        }
        e.outputs.iter().all(|(rel, h)| {
            let p = self.path(rel);
            p.exists() && util::hash_path(&p).map(|x| &x == h).unwrap_or(false)
        })
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        if stage == Stage::Audit && self.audit.is_none() {
            return Err(Error::Config("the audit stage needs a verdict file".into()));
        }
        let inputs = self.check_inputs(stage)?;
        let params = self.params_hash(stage);
        let name = stage.name();
        if !self.force && self.up_to_date(stage, &params, &inputs) {
            log::info!("{name}: up to date");
            return Ok(StageOutcome { stage: name, status: Status::UpToDate, llm_calls: 0, estimated_llm_calls: None });
        }
        if self.dry_run {
            let est = self.estimate_calls(stage)?;
            self.planned.extend(stage.outputs());
            return Ok(StageOutcome { stage: name, status: Status::Planned, llm_calls: 0, estimated_llm_calls: est });
        }
        log::info!("{name}: running");
        let started = now_unix();
        if let Some(g) = &self.gateway {
            g.reset_stats();
        }
        let mut rec = Record::default();
        self.execute(stage, &mut rec)?;
        let (llm_calls, cache_hits) = self.gateway.as_ref().map_or((0, 0), |g| {
            let s = g.stats();
            (s.backend_calls, s.cache_hits)
        });
        let mut outputs = BTreeMap::new();
        for rel in stage.outputs() {
            outputs.insert(rel.clone(), util::hash_path(&self.path(&rel))?);
        }
        let entry = StageEntry {
            stage: name.clone(),
            params_hash: params,
            inputs,
            outputs,
            seeds: rec.seeds,
            llm_calls,
            cache_hits,
            started_unix: started,
            finished_unix: now_unix(),
            notes: rec.notes,
        };
        self.manifest.append(&self.run_dir, entry)?;
        Ok(StageOutcome { stage: name, status: Status::Ran, llm_calls, estimated_llm_calls: None })
    }

    fn gateway(&mut self) -> Result<&Gateway> {
        if self.gateway.is_none() {
            let llm = &self.cfg.llm;
            let backend: Arc<dyn crate::llm::LlmBackend> = match llm.backend {
                BackendKind::Mock => {
                    let p = self.cfg.resolve(llm.mock_spec.as_ref().expect("validated"));
                    let spec: MockSpec = util::read_json(&p)?;
                    Arc::new(MockBackend::from_spec(spec))
                }
                BackendKind::Hosted => {
                    let key = std::env::var(&llm.api_key_env)
                        .map_err(|_| Error::Config(format!("environment variable {} is not set", llm.api_key_env)))?;
                    Arc::new(HostedBackend::new(&llm.base_url, key))
                }
            };
            let g = Gateway::new(backend)
                .with_cache_dir(self.path(LLM_CACHE))
                .with_retry(RetryPolicy { max_attempts: llm.max_attempts, ..RetryPolicy::default() })
                .with_in_flight_limit(llm.in_flight);
            self.gateway = Some(g);
        }
        Ok(self.gateway.as_ref().unwrap())
    }

    fn corpus(&self) -> Result<Corpus> {
        data_model::load_corpus(&self.path(CORPUS), &self.cfg.task.schema)
    }

    fn partition(&self, corpus: &Corpus) -> Result<Partition> {
        let m: SplitManifest = util::read_json(&self.path(SPLIT))?;
        apply_manifest(corpus, &m)
    }

    fn matrix(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::load(&self.path(MATRIX))
    }

    fn kinds_columns(matrix: &FeatureMatrix, kinds: &[FeatureKind]) -> Result<FeatureMatrix> {
        let ids: Vec<String> =
            matrix.descriptors.iter().filter(|d| kinds.contains(&d.kind)).map(|d| d.id.clone()).collect();
        if ids.is_empty() {
            return Err(Error::Config(format!("the feature matrix holds no {} column", variant_name(kinds))));
        }
        matrix.select_columns(&ids)
    }

    fn p_l_seed(&self) -> u64 {
        self.cfg.task.seed.wrapping_add(1)
    }

    fn estimate_calls(&self, stage: Stage) -> Result<Option<u64>> {
        let c = &self.cfg;
        let sizes = || -> Result<Option<(usize, usize)>> {
            if self.path(SPLIT).exists() {
                let m: SplitManifest = util::read_json(&self.path(SPLIT))?;
                return Ok(Some((m.train.len(), m.test.len())));
            }
            let src = if self.path(CORPUS).exists() { self.path(CORPUS) } else { c.resolve(&c.data.corpus) };
            if !src.exists() {
                return Ok(None);
            }
            let n = data_model::load_corpus(&src, &c.task.schema)?.len();
            let test = (c.split.test_frac * n as f64 + 1e-9).floor() as usize;
            let val = (c.split.val_frac * n as f64 + 1e-9).floor() as usize;
            Ok(Some((n - test - val, test)))
        };
        let frac = |f: f64, n: usize| ((f * n as f64).round() as u64).clamp(1, n.max(1) as u64);
        Ok(match stage {
            Stage::GenBsq => sizes()?.map(|(tr, _)| frac(c.task.params.p_q, tr)),
            Stage::WeakLabel => {
                let c_plus = if self.path(AUGMENTED).exists() {
                    bsq::load_registry(&self.path(AUGMENTED))?.iter().filter(|b| b.active).count() as u64
                } else {
                    c.task.params.c_plus as u64
                };
                let per = if c.weak_label.mode == LabelMode::Cot { 2 } else { 1 };
                sizes()?.map(|(tr, _)| frac(c.task.params.p_l, tr) * c_plus * per)
            }
            Stage::Baseline(s) => {
                let per = match s {
                    Strategy::Vanilla => 1,
                    Strategy::Cot => 2,
                    Strategy::SelfAsk => 2 + c.baseline.as_ref().map_or(4, |b| b.max_follow_ups) as u64,
                };
                sizes()?.map(|(_, te)| te as u64 * per)
            }
            _ => Some(0),
        })
    }

    fn execute(&mut self, stage: Stage, rec: &mut Record) -> Result<()> {
        match stage {
            Stage::Ingest => self.ingest(rec),
            Stage::Split => self.split(rec),
            Stage::GenBsq => self.gen_bsq(rec),
            Stage::CurateImport => self.curate_import(rec),
            Stage::AugmentBsq => self.augment_bsq(rec),
            Stage::WeakLabel => self.weak_label(rec),
            Stage::TrainNllfg => self.train_nllfg(rec),
            Stage::BuildFeatures => self.build_features(rec),
            Stage::SelectFeatures => self.select_features(rec),
            Stage::TrainTree => self.train_tree(rec),
            Stage::TrainEncoder => self.train_encoder(rec),
            Stage::Baseline(s) => self.baseline(s, rec),
            Stage::Evaluate => self.evaluate(rec),
            Stage::Explain => self.explain(rec),
            Stage::Audit => self.audit_stage(rec),
        }
    }

    fn ingest(&mut self, rec: &mut Record) -> Result<()> {
        let src = self.cfg.resolve(&self.cfg.data.corpus);
        let corpus = data_model::load_corpus(&src, &self.cfg.task.schema)?;
        rec.note("examples", json!(corpus.len()));
        rec.note("positive_rate", json!(corpus.positive_rate()));
        corpus.save(&self.path(CORPUS))
    }

    fn split(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let spec = &self.cfg.split;
        let part = data_model::split(&corpus, spec)?;
        rec.seeds.insert("split".into(), spec.seed);
        rec.note("sizes", json!([part.train.len(), part.val.len(), part.test.len()]));
        util::write_json(&self.path(SPLIT), &part.manifest(spec))
    }

    fn gen_bsq(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let p_q = self.cfg.task.params.p_q;
        let sample = data_model::sample_fraction(&part.train, p_q, self.cfg.task.seed)?;
        let template = self.cfg.template(&self.cfg.bsq.generation_template)?;
        let params = self.cfg.llm.params();
        let (schema, per_sample) = (self.cfg.task.schema.clone(), self.cfg.bsq.per_sample);
        let outcome = bsq::generate_raw_bsqs(self.gateway()?, &params, &sample, &template, &schema, per_sample)?;
        rec.seeds.insert("p_q_sample".into(), self.cfg.task.seed);
        rec.note("p_q", json!(p_q));
        rec.note("p_q_sample_size", json!(sample.len()));
        rec.note("raw_questions", json!(outcome.bsqs.len()));
        rec.note("misses", json!(outcome.misses));
        util::write_json(&self.path(PQ_SAMPLE), &ids(&sample))?;
        bsq::save_registry(&self.path(RAW), &outcome.bsqs)?;
        bsq::export_for_review(&outcome.bsqs, &self.path(REVIEW))
    }

    fn curate_import(&mut self, rec: &mut Record) -> Result<()> {
        let raw = bsq::load_registry(&self.path(RAW))?;
        let review = match &self.cfg.bsq.review {
            Some(p) => self.cfg.resolve(p),
            None => self.path(REVIEW),
        };
        let curated = bsq::import_curated(&review, &raw)?;
        if curated.len() != self.cfg.task.params.c {
            log::warn!("curated {} questions; the task config expects C={}", curated.len(), self.cfg.task.params.c);
        }
        rec.note("C", json!(curated.len()));
        bsq::save_registry(&self.path(CURATED), &curated)
    }

    fn augment_bsq(&mut self, rec: &mut Record) -> Result<()> {
        let curated = bsq::load_registry(&self.path(CURATED))?;
        let load = |p: &Option<PathBuf>| -> Result<Vec<Bsq>> {
            p.as_ref().map_or(Ok(Vec::new()), |p| bsq::load_registry(&self.cfg.resolve(p)))
        };
        let extras = AugmentSources {
            raw_pool: if self.cfg.bsq.include_raw_pool { bsq::load_registry(&self.path(RAW))? } else { Vec::new() },
            linguistic: load(&self.cfg.bsq.linguistic)?,
            human: load(&self.cfg.bsq.human)?,
            paraphrases: load(&self.cfg.bsq.paraphrases)?,
        };
        let augmented = bsq::augment(&curated, &extras)?;
        if augmented.len() != self.cfg.task.params.c_plus {
            log::warn!("augmented pool has {} questions; the task config expects C+={}", augmented.len(), self.cfg.task.params.c_plus);
        }
        rec.note("C", json!(curated.len()));
        rec.note("C_plus", json!(augmented.len()));
        bsq::save_registry(&self.path(AUGMENTED), &augmented)
    }

    fn weak_label(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let p_l = self.cfg.task.params.p_l;
        let sample = data_model::sample_fraction(&part.train, p_l, self.p_l_seed())?;
        let bsqs: Vec<Bsq> = bsq::load_registry(&self.path(AUGMENTED))?.into_iter().filter(|b| b.active).collect();
        let templates = self.cfg.label_templates()?;
        let params = self.cfg.llm.params();
        let cfg = self.cfg.clone();
        let out = weak_labeler::weak_label(
            self.gateway()?,
            &params,
            &sample,
            &bsqs,
            cfg.weak_label.mode,
            &templates,
            &cfg.task.schema,
            &cfg.weak_label.lexicon,
        )?;
        if !out.failures.is_empty() {
            log::warn!("{} response(s) held no usable verdict and were dropped", out.failures.len());
        }
        rec.seeds.insert("p_l_sample".into(), self.p_l_seed());
        rec.note("p_l", json!(p_l));
        rec.note("p_l_sample_size", json!(sample.len()));
        rec.note("labels", json!(out.labels.len()));
        rec.note("failures", json!(out.failures.len()));
        let hist = weak_labeler::histogram(&out.labels, &bsqs);
        weak_labeler::write_histogram_csv(&self.path(HISTOGRAM), &hist)?;
        util::write_jsonl(&self.path(WEAK_FAILURES), &out.failures)?;
        util::write_jsonl(&self.path(WEAK), &out.labels)
    }

    fn train_nllfg(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let labels: Vec<WeakLabel> = util::read_jsonl(&self.path(WEAK))?;
        let bsqs = bsq::load_registry(&self.path(AUGMENTED))?;
        let hyper = self.cfg.nllfg.clone();
        let split = nllfg::build_training_set(&labels, &corpus, &bsqs, &self.cfg.task.schema, self.cfg.task.seed)?;
        let trained_on = BTreeMap::from([
            (WEAK.to_string(), util::hash_file(&self.path(WEAK))?),
            (AUGMENTED.to_string(), util::hash_file(&self.path(AUGMENTED))?),
        ]);
        let model = nllfg::train(&split, &hyper, trained_on)?;
        let report = &model.manifest.report;
        let sel = report.epochs.iter().find(|e| e.epoch == report.selected_epoch);
        rec.seeds.insert("nllfg".into(), hyper.seed);
        rec.seeds.insert("pair_split".into(), self.cfg.task.seed);
        rec.note("train_pairs", json!(split.train.len()));
        rec.note("val_pairs", json!(split.val.len()));
        rec.note("selected_epoch", json!(report.selected_epoch));
        if let Some(e) = sel {
            rec.note("val_accuracy", json!(e.val_accuracy));
            rec.note("val_loss", json!(e.val_loss));
        }
        let dir = self.path(NLLFG_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        model.save(&dir)
    }

    fn build_features(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let schema = self.cfg.task.schema.clone();
        let bsqs = bsq::load_registry(&self.path(AUGMENTED))?;
        let model = NllfgModel::load(&self.path(NLLFG_DIR))?;
        let mut cache = NllfCache::open(&self.path(NLLF_CACHE), model.fingerprint())?;
        let (nllf, stats) = features::build_nllf(&model, &corpus, &bsqs, &schema, &mut cache)?;
        cache.save()?;
        rec.note("nllf_scored", json!(stats.scored));
        rec.note("nllf_cached", json!(stats.cached));

        let mut blocks = vec![nllf];
        if let Some(p) = &self.cfg.features.expert_rules {
            let bank = ExpertBank::load(&self.cfg.resolve(p))?;
            rec.note("expert_rules", json!(bank.len()));
            blocks.push(bank.build(&corpus, &schema)?);
        }
        let train_texts: Vec<String> = part.train.examples.iter().map(|e| e.joined_text(&schema)).collect();
        let vocab = BongVocabulary::fit(&train_texts.iter().map(String::as_str).collect::<Vec<_>>(), &self.cfg.features.bong)?;
        let all_texts: Vec<String> = corpus.examples.iter().map(|e| e.joined_text(&schema)).collect();
        blocks.push(vocab.transform(ids(&corpus), &all_texts.iter().map(String::as_str).collect::<Vec<_>>())?);
        rec.note("bong_terms", json!(vocab.terms.len()));
        util::write_json(&self.path(BONG_VOCAB), &vocab)?;

        let matrix = assemble(&blocks.iter().collect::<Vec<_>>())?;
        rec.note("width", json!(matrix.width()));
        matrix.save(&self.path(MATRIX))
    }

    fn select_features(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let sel = &self.cfg.selection;
        let m = Self::kinds_columns(&self.matrix()?, &sel.kinds)?.select_rows(&ids(&part.train))?;
        let y = gold_indices(&part.train)?;
        let report = if sel.disabled {
            SelectionReport {
                feature_ids: m.descriptors.iter().map(|d| d.id.clone()).collect(),
                counts: vec![0; m.width()],
                selected: vec![true; m.width()],
                folds: 0,
                threshold: 0,
                ga: sel.ga.clone(),
                mode: self.cfg.task.params.metric_mode,
                fitness: "disabled".into(),
                fold_results: Vec::new(),
            }
        } else {
            selection::select(&m, &y, sel.folds, &sel.ga, self.cfg.task.params.metric_mode)?
        };
        rec.seeds.insert("ga".into(), sel.ga.seed);
        rec.note("candidates", json!(m.width()));
        rec.note("selected", json!(report.selected_ids().len()));
        rec.note("threshold", json!(report.threshold));
        util::write_json(&self.path(SELECTION), &report)
    }

    fn train_tree(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let report: SelectionReport = util::read_json(&self.path(SELECTION))?;
        let keep = report.selected_ids();
        if keep.is_empty() {
            return Err(Error::validation("feature selection kept no column; lower the fold threshold or disable selection"));
        }
        let m = self.matrix()?.select_columns(&keep)?.select_rows(&ids(&part.train))?;
        let params = self.cfg.tree_params();
        let tree = DecisionTree::train(&m, &gold_indices(&part.train)?, &params)?;
        rec.seeds.insert("tree".into(), params.seed);
        rec.note("depth", json!(tree.depth()));
        rec.note("leaves", json!(tree.leaves()));
        let [neg, pos] = &self.cfg.task.label_names;
        util::write_atomic(&self.path(TREE_DOT), tree.to_dot([neg, pos]).as_bytes())?;
        util::write_json(&self.path(TREE), &tree)
    }

    fn encoder_extra(&self) -> Result<Option<FeatureMatrix>> {
        let extra = &self.cfg.encoder.extra;
        if extra.is_empty() {
            return Ok(None);
        }
        Ok(Some(Self::kinds_columns(&self.matrix()?, extra)?))
    }

    fn train_encoder(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let extra = self.encoder_extra()?;
        let hyper = self.cfg.encoder.hyper(&self.cfg.task.name);
        let clf = EncoderClassifier::train(
            &part.train,
            &gold_indices(&part.train)?,
            &part.val,
            &gold_indices(&part.val)?,
            extra.as_ref(),
            &self.cfg.task.schema,
            &hyper,
        )?;
        rec.seeds.insert("encoder".into(), hyper.seed);
        rec.note("summary", json!(clf.summary()));
        let dir = self.path(ENCODER_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        clf.save(&dir)
    }

    fn baseline(&mut self, strategy: Strategy, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let cfg = self.cfg.baseline_config(strategy, majority(&part.train))?;
        let params = self.cfg.llm.params();
        let schema = self.cfg.task.schema.clone();
        let preds = prompt_classify(self.gateway()?, &params, &cfg, &part.test, &part.train, &schema)?;
        rec.note("abstentions", json!(preds.iter().filter(|p| p.abstained).count()));
        rec.note("shots", json!(cfg.shots));
        util::write_jsonl(&self.path(&baseline_path(strategy)), &preds)
    }

    /// Evaluates every trained model present in the run directory.
    pub fn evaluation(&self) -> Result<Evaluation> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let mode = self.cfg.task.params.metric_mode;
        let gold: Vec<Label> = gold_indices(&part.test)?.into_iter().map(Label::from_index).collect();
        let mut rows = Vec::new();

        let tree: DecisionTree = util::read_json(&self.path(TREE))?;
        let m = tree.align(&self.matrix()?)?.select_rows(&ids(&part.test))?;
        let pred: Vec<Label> = (0..m.height()).map(|i| Label::from_index(tree.predict(m.row(i)))).collect();
        rows.push(EvaluationRow {
            model: "DT".into(),
            variant: variant_name(&self.cfg.selection.kinds),
            report: metrics::score(&pred, &gold, mode)?,
            abstentions: None,
        });

        if self.path(ENCODER_DIR).exists() {
            let clf = EncoderClassifier::load(&self.path(ENCODER_DIR))?;
            let extra = if clf.manifest.extra_ids.is_empty() { None } else { Some(self.matrix()?) };
            let pred: Vec<Label> = clf.predict(&part.test, extra.as_ref())?.into_iter().map(Label::from_index).collect();
            let variant = if self.cfg.encoder.extra.is_empty() {
                "vanilla".to_string()
            } else {
                format!("+{}", variant_name(&self.cfg.encoder.extra))
            };
            rows.push(EvaluationRow { model: "Encoder".into(), variant, report: metrics::score(&pred, &gold, mode)?, abstentions: None });
        }

        for s in [Strategy::Vanilla, Strategy::Cot, Strategy::SelfAsk] {
            let p = self.path(&baseline_path(s));
            if !p.exists() {
                continue;
            }
            let preds: Vec<PromptPrediction> = util::read_jsonl(&p)?;
            let by_id: BTreeMap<&str, &PromptPrediction> = preds.iter().map(|p| (p.example_id.as_str(), p)).collect();
            let pred = part
                .test
                .examples
                .iter()
                .map(|e| {
                    by_id.get(e.id.as_str()).map(|p| p.label).ok_or_else(|| {
                        Error::Stale { path: p.clone(), hint: format!("no prediction for `{}`; rerun `nllf baseline {}`", e.id, strategy_name(s)) }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let shots = self.cfg.baseline.as_ref().map_or(0, |b| b.shots);
            rows.push(EvaluationRow {
                model: "LLM".into(),
                variant: format!("{} {shots}-shot", strategy_name(s)),
                report: metrics::score(&pred, &gold, mode)?,
                abstentions: Some(preds.iter().filter(|p| p.abstained).count()),
            });
        }
        Ok(Evaluation { task: self.cfg.task.name.clone(), test_size: gold.len(), rows })
    }

    fn evaluate(&mut self, rec: &mut Record) -> Result<()> {
        let ev = self.evaluation()?;
        let mut md = metrics::table_header(&[&ev.task.to_uppercase()]);
        for r in &ev.rows {
            md.push('\n');
            md.push_str(&metrics::table_row(&r.model, &r.variant, &[&r.report]));
        }
        md.push('\n');
        for r in &ev.rows {
            rec.note(&format!("{} {}", r.model, r.variant), json!(r.report.headline_f1()));
        }
        util::write_atomic(&self.path(EVAL_MD), md.as_bytes())?;
        util::write_json(&self.path(EVAL_JSON), &ev)
    }

    fn explain(&mut self, rec: &mut Record) -> Result<()> {
        let corpus = self.corpus()?;
        let part = self.partition(&corpus)?;
        let tree: DecisionTree = util::read_json(&self.path(TREE))?;
        let m = self.matrix()?.select_rows(&ids(&part.test))?;
        let [neg, pos] = &self.cfg.task.label_names;
        let docs = render_explanations(&tree, &m, &part.test, &self.cfg.task.schema, [neg, pos])?;
        rec.note("documents", json!(docs.len()));
        util::write_atomic(&self.path(EXPLAIN_MD), explanations_markdown(&docs).as_bytes())?;
        util::write_json(&self.path(EXPLAIN_JSON), &docs)
    }

    fn audit_stage(&mut self, rec: &mut Record) -> Result<()> {
        let args = self.audit.clone().expect("checked in run_stage");
        let sample = AuditSample::load_csv(&args.verdicts)?;
        let mut report = audit(&sample, self.cfg.task.params.metric_mode)?;
        let score = match args.student_score {
            Some(s) => Some(s),
            None if self.path(NLLFG_DIR).exists() => {
                let m = NllfgModel::load(&self.path(NLLFG_DIR))?;
                let r = &m.manifest.report;
                r.epochs.iter().find(|e| e.epoch == r.selected_epoch).map(|e| e.val_accuracy)
            }
            None => None,
        };
        if let Some(s) = score {
            report = report.with_compounding(&args.teacher, &args.student, s)?;
        }
        rec.note("items", json!(report.items));
        rec.note("excluded", json!(report.excluded_missing_expert));
        util::write_atomic(&self.path(AUDIT_MD), report.to_markdown().as_bytes())?;
        util::write_json(&self.path(AUDIT_JSON), &report)
    }
}
