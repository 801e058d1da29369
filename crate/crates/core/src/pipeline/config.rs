//! Per-task TOML configuration. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_model::{Label, SplitSpec, TaskConfig};
use crate::error::{Error, Result};
use crate::features::{BongParams, FeatureKind};
use crate::llm::{CompletionParams, PromptTemplate};
use crate::models::prompting::{BaselineTemplates, PromptBaselineConfig, Strategy};
use crate::models::{EncoderHyper, TreeParams};
use crate::nllfg::TrainHyper;
use crate::selection::GaParams;
use crate::util;
use crate::weak_labeler::{LabelMode, LabelTemplates, Lexicon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskSection,
    pub data: DataSection,
    pub split: SplitSpec,
    pub llm: LlmSection,
    pub bsq: BsqSection,
    pub weak_label: WeakLabelSection,
    #[serde(default)]
    pub nllfg: TrainHyper,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub baseline: Option<BaselineSection>,
    #[serde(default)]
    pub run: RunSection,
    /// Directory holding the config; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub name: String,
    /// Text fields, in premise order.
    pub schema: Vec<String>,
    /// Display names, `[negative, positive]`.
    #[serde(default = "default_label_names")]
    pub label_names: [String; 2],
    #[serde(flatten)]
    pub params: TaskConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_label_names() -> [String; 2] {
    ["negative".into(), "positive".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    Hosted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    pub backend: BackendKind,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// JSON `MockSpec`, for the mock backend.
    #[serde(default)]
    pub mock_spec: Option<PathBuf>,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
}

fn default_max_tokens() -> u32 {
    512
}
fn default_base_url() -> String {
    "https://api.openai.com/v1".into()
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_in_flight() -> usize {
    8
}
fn default_attempts() -> u32 {
    3
}

impl LlmSection {
    pub fn params(&self) -> CompletionParams {
        CompletionParams { temperature: self.temperature, max_tokens: self.max_tokens, ..CompletionParams::new(&self.model) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsqSection {
    pub generation_template: PathBuf,
    #[serde(default = "default_per_sample")]
    pub per_sample: usize,
    /// Edited review file; the exported one is imported untouched when absent.
    #[serde(default)]
    pub review: Option<PathBuf>,
    /// Keep every raw question in the augmented pool.
    #[serde(default)]
    pub include_raw_pool: bool,
    #[serde(default)]
    pub linguistic: Option<PathBuf>,
    #[serde(default)]
    pub human: Option<PathBuf>,
    #[serde(default)]
    pub paraphrases: Option<PathBuf>,
}

fn default_per_sample() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakLabelSection {
    #[serde(default)]
    pub mode: LabelMode,
    pub direct_template: PathBuf,
    #[serde(default)]
    pub cot_reason_template: Option<PathBuf>,
    #[serde(default)]
    pub cot_answer_template: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Lexicon,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    #[serde(default)]
    pub expert_rules: Option<PathBuf>,
    #[serde(default)]
    pub bong: BongParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub folds: usize,
    /// Feature families offered to selection and the tree.
    pub kinds: Vec<FeatureKind>,
    /// Skip the GA and keep every column of `kinds`.
    pub disabled: bool,
    pub ga: GaParams,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection { folds: 15, kinds: vec![FeatureKind::Nllf], disabled: false, ga: GaParams::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    /// Overrides the per-variant defaults when set.
    #[serde(default)]
    pub params: Option<TreeParams>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    /// Feature families appended to the encoder's pooled output.
    #[serde(default)]
    pub extra: Vec<FeatureKind>,
    #[serde(default)]
    pub backbone_id: Option<String>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderSection {
    pub fn hyper(&self, task: &str) -> EncoderHyper {
        let mut h = EncoderHyper::for_task(task, !self.extra.is_empty());
        if let Some(b) = &self.backbone_id {
            h.backbone_id = b.clone();
        }
        h.epochs = self.epochs.unwrap_or(h.epochs);
        h.batch = self.batch.unwrap_or(h.batch);
        h.lr = self.lr.unwrap_or(h.lr);
        h.max_len = self.max_len.unwrap_or(h.max_len);
        h.seed = self.seed;
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub exemplars: Vec<String>,
    #[serde(default = "default_follow_ups")]
    pub max_follow_ups: usize,
    /// `yes` words vote positive, `no` words negative.
    pub verdicts: Lexicon,
    pub classify_template: PathBuf,
    #[serde(default)]
    pub cot_answer_template: Option<PathBuf>,
    #[serde(default)]
    pub self_ask_template: Option<PathBuf>,
    #[serde(default)]
    pub follow_up_template: Option<PathBuf>,
    #[serde(default)]
    pub final_answer_template: Option<PathBuf>,
}

fn default_follow_ups() -> usize {
    4
}

/// What `nllf run` executes after the tree.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub encoder: bool,
    #[serde(default)]
    pub baselines: Vec<Strategy>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.params.validate()?;
        self.split.validate()?;
        if self.task.schema.is_empty() {
            return Err(Error::Config("task.schema lists no text field".into()));
        }
        if self.selection.kinds.is_empty() {
            return Err(Error::Config("selection.kinds is empty".into()));
        }
        if self.selection.folds < 2 && !self.selection.disabled {
            return Err(Error::Config("selection.folds must be at least 2".into()));
        }
        if self.llm.backend == BackendKind::Mock && self.llm.mock_spec.is_none() {
            return Err(Error::Config("the mock backend needs llm.mock_spec".into()));
        }
        if self.weak_label.mode == LabelMode::Cot
            && (self.weak_label.cot_reason_template.is_none() || self.weak_label.cot_answer_template.is_none())
        {
            return Err(Error::Config("cot weak labeling needs both cot templates".into()));
        }
        if !self.run.baselines.is_empty() && self.baseline.is_none() {
            return Err(Error::Config("run.baselines needs a [baseline] section".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn template(&self, p: &Path) -> Result<PromptTemplate> {
        PromptTemplate::load(&self.resolve(p))
    }

    /// Stable hash of the parsed config, independent of formatting.
    pub fn hash(&self) -> String {
        util::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of one section, used to decide whether a stage is up to date.
    pub fn section_hash<T: Serialize>(section: &T) -> String {
        util::sha256_hex(serde_json::to_string(section).expect("section serializes").as_bytes())
    }

    pub fn label_templates(&self) -> Result<LabelTemplates> {
        let w = &self.weak_label;
        Ok(LabelTemplates {
            direct: self.template(&w.direct_template)?,
            cot_reason: w.cot_reason_template.as_deref().map(|p| self.template(p)).transpose()?,
            cot_answer: w.cot_answer_template.as_deref().map(|p| self.template(p)).transpose()?,
        })
    }

    pub fn baseline_config(&self, strategy: Strategy, fallback: Label) -> Result<PromptBaselineConfig> {
        let b = self
            .baseline
            .as_ref()
            .ok_or_else(|| Error::Config("no [baseline] section in the config".into()))?;
        let opt = |p: &Option<PathBuf>| p.as_deref().map(|p| self.template(p)).transpose();
        let [neg, pos] = self.task.label_names.clone();
        let cfg = PromptBaselineConfig {
            strategy,
            shots: b.shots,
            exemplar_ids: b.exemplars.clone(),
            max_follow_ups: b.max_follow_ups,
            verdicts: b.verdicts.clone(),
            label_words: [neg, pos],
            templates: BaselineTemplates {
                classify: self.template(&b.classify_template)?,
                cot_answer: opt(&b.cot_answer_template)?,
                self_ask: opt(&b.self_ask_template)?,
                follow_up: opt(&b.follow_up_template)?,
                final_answer: opt(&b.final_answer_template)?,
            },
            fallback,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Tree settings for the configured feature families.
    pub fn tree_params(&self) -> TreeParams {
        self.tree
            .params
            .clone()
            .unwrap_or_else(|| crate::models::tree_params_for(&self.selection.kinds, self.tree.seed))
    }
}
