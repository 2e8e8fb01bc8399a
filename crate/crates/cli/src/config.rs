//! Run configuration read from the `--config` JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uragate_core::corpus::CorpusConfig;
use uragate_core::engine::EngineConfig;
use uragate_core::{Error, Result};

/// Everything a subcommand may need. Unknown keys anywhere are rejected and
/// omitted keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub engine: EngineConfig,
    /// Seed for backbone construction, module initialisation and training.
    /// `--seed` takes precedence.
    pub seed: u64,
    /// Read documents from this JSONL file instead of regenerating them from
    /// `corpus`.
    pub corpus_path: Option<PathBuf>,
    /// Checkpoint manifest to start from. Defaults to the one the previous
    /// stage writes under the output directory.
    pub checkpoint: Option<PathBuf>,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
    pub flops: FlopsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            engine: EngineConfig::default(),
            seed: 42,
            corpus_path: None,
            checkpoint: None,
            eval: EvalSection::default(),
            analysis: AnalysisSection::default(),
            flops: FlopsSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate only the first this many test questions.
    pub max_questions: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub max_questions: Option<usize>,
    /// Index within the test split of the document whose similarity map is
    /// exported.
    pub similarity_doc: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { max_questions: Some(100), similarity_doc: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    /// Page counts swept on the toy model.
    pub page_counts: Vec<usize>,
    /// Page counts swept on the full-scale preset.
    pub full_scale_page_counts: Vec<usize>,
}

impl Default for FlopsSection {
    fn default() -> Self {
        FlopsSection {
            page_counts: vec![8, 16, 32],
            full_scale_page_counts: vec![20, 40, 60, 80, 100],
        }
    }
}

impl RunConfig {
    /// Parses `text`, reporting the JSON path of the first offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            field: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "--config".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.engine.validate()?;
        if self.analysis.max_questions == Some(0) {
            return Err(Error::Config { field: "analysis.max_questions".into(), reason: "must be positive".into() });
        }
        if self.eval.max_questions == Some(0) {
            return Err(Error::Config { field: "eval.max_questions".into(), reason: "must be positive".into() });
        }
        for (field, counts) in [
            ("flops.page_counts", &self.flops.page_counts),
            ("flops.full_scale_page_counts", &self.flops.full_scale_page_counts),
        ] {
            if counts.is_empty() || counts.contains(&0) {
                return Err(Error::Config { field: field.into(), reason: "needs positive page counts".into() });
            }
        }
        Ok(())
    }
}
