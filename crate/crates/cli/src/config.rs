//! Run configuration: one TOML file, command-line overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mpl_core::data_synth::{CorpusSpec, Domain, DEFAULT_RATIOS};
use mpl_core::model::ModelConfig;
use mpl_core::training::{Setting, TrainConfig};

use crate::CliError;

/// Architecture settings that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_width: usize,
    pub max_title_len: usize,
    pub max_input_len: usize,
    pub n_prompts: usize,
    pub dropout: f64,
    pub align_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::desk(0, 0, 0);
        ModelSection {
            d: c.d,
            n_heads: c.n_heads,
            n_enc_layers: c.n_enc_layers,
            n_dec_layers: c.n_dec_layers,
            ffn_width: c.ffn_width,
            max_title_len: c.max_title_len,
            max_input_len: c.max_input_len,
            n_prompts: c.n_prompts,
            dropout: c.dropout,
            align_scale: c.align_scale,
        }
    }
}

impl ModelSection {
    pub fn resolve(
        &self,
        vocab_size: usize,
        image_seq_len: usize,
        image_feature_dim: usize,
    ) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            ffn_width: self.ffn_width,
            vocab_size,
            max_title_len: self.max_title_len,
            max_input_len: self.max_input_len,
            image_feature_dim,
            image_seq_len,
            n_prompts: self.n_prompts,
            dropout: self.dropout,
            align_scale: self.align_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratios: DEFAULT_RATIOS,
            seed: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub settings: Vec<Setting>,
    /// Stop with a nonzero exit when MPL does not beat Base on median CIDEr.
    pub require_ordering: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: vec![0, 1, 2, 3, 4],
            settings: Setting::ALL.to_vec(),
            require_ordering: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where gen-data writes and every other command reads the dataset.
    pub data_dir: PathBuf,
    /// Novel-domain corpus; its seed also fixes the visual world of the source corpus.
    pub corpus: CorpusSpec,
    /// Products in the source-domain corpus used for pretraining; 0 disables it.
    pub source_products: usize,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Source-domain pretraining schedule.
    pub pretrain: TrainConfig,
    pub ablation: AblationSection,
    /// Top entries per row reported in attention dumps.
    pub attention_top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            corpus: CorpusSpec {
                n_products: 3000,
                domain: Domain::Novel,
                seed: 11,
                ..CorpusSpec::default()
            },
            source_products: 2000,
            split: SplitSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                setting: Setting::Base,
                batch_size: 16,
                max_epochs: 6,
                patience: 2,
                val_cap: 40,
                fewshot: 1.0,
                ..TrainConfig::default()
            },
            ablation: AblationSection::default(),
            attention_top_k: 3,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    /// Parses a possibly partial file. Keys it leaves out keep the values of
    /// [`RunConfig::default`], section by section.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged =
            toml::Table::try_from(RunConfig::default()).expect("default configuration serializes");
        merge(&mut merged, user);
        merged.try_into()
    }

    /// Source-domain corpus spec, sharing the novel corpus' generator settings.
    pub fn source_spec(&self) -> Option<CorpusSpec> {
        (self.source_products > 0).then(|| CorpusSpec {
            n_products: self.source_products,
            domain: Domain::Pretrain,
            templates: Vec::new(),
            ..self.corpus.clone()
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: mpl_core::Error| CliError::Usage(e.to_string());
        self.train.validate().map_err(usage)?;
        self.pretrain.validate().map_err(usage)?;
        if self.ablation.seeds.is_empty() || self.ablation.settings.is_empty() {
            return Err(CliError::Usage(
                "ablation needs at least one seed and one setting".into(),
            ));
        }
        if self.attention_top_k == 0 {
            return Err(CliError::Usage("attention_top_k must be at least 1".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
