//! The run configuration: one `section.key = value` file covering every stage.

use std::path::Path;

use eclf_core::classifier::ClassifierConfig;
use eclf_core::explainer::ExplainConfig;
use eclf_core::heads::HeadsConfig;
use eclf_core::metrics::SweepConfig;
use eclf_core::synthleaf::{ClassRule, DatasetSpec, IngestSpec, Preset};
use eclf_core::textconf::{parse_assignments, render_section, Section};
use eclf_core::vae::TrainingConfig;
use eclf_core::{EclfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Required by `gen-data`; `auto` elsewhere.
    pub preset: Option<Preset>,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Training images per class kept by `ingest`; `auto` keeps all remaining.
    pub ingest_train_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DataConfig {
            preset: None,
            image_size: d.image_size,
            train_per_class: d.train_per_class,
            val_per_class: d.val_per_class,
            test_per_class: d.test_per_class,
            ingest_train_per_class: None,
            seed: d.seed,
        }
    }
}

eclf_core::kv_section!(DataConfig {
    preset,
    image_size,
    train_per_class,
    val_per_class,
    test_per_class,
    ingest_train_per_class,
    seed
});

impl DataConfig {
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let preset = self
            .preset
            .ok_or_else(|| EclfError::config("data.preset", "required: set synth2, synth3 or synth4"))?;
        if preset == Preset::Folder {
            return Err(EclfError::config("data.preset", "folder data comes from `eclf ingest`, not `gen-data`"));
        }
        Ok(DatasetSpec {
            preset,
            image_size: self.image_size,
            train_per_class: self.train_per_class,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            seed: self.seed,
            rule: ClassRule::default(),
        })
    }

    pub fn ingest_spec(&self) -> IngestSpec {
        IngestSpec {
            image_size: self.image_size,
            train_per_class: self.ingest_train_per_class,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vae: TrainingConfig,
    pub heads: HeadsConfig,
    pub classifier: ClassifierConfig,
    pub explain: ExplainConfig,
    pub sweep: SweepConfig,
}

pub const SECTIONS: [&str; 6] = ["data", "vae", "heads", "classifier", "explain", "sweep"];

impl RunConfig {
    fn section_mut(&mut self, name: &str) -> Option<&mut dyn Section> {
        Some(match name {
            "data" => &mut self.data,
            "vae" => &mut self.vae,
            "heads" => &mut self.heads,
            "classifier" => &mut self.classifier,
            "explain" => &mut self.explain,
            "sweep" => &mut self.sweep,
            _ => return None,
        })
    }

    /// Applies one `section.key` override.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted.split_once('.').ok_or_else(|| EclfError::config(dotted, "expected `section.key`"))?;
        match self.section_mut(section) {
            Some(s) => s.apply(section, key, value),
            None => Err(EclfError::config(dotted, format!("unknown section; expected one of {}", SECTIONS.join(", ")))),
        }
    }

    /// Seeds every stage from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.vae.seed = seed;
        self.classifier.seed = seed;
        self.explain.seed = seed;
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&render_section("data", &self.data));
        out.push_str(&render_section("vae", &self.vae));
        out.push_str(&render_section("heads", &self.heads));
        out.push_str(&render_section("classifier", &self.classifier));
        out.push_str(&render_section("explain", &self.explain));
        out.push_str(&render_section("sweep", &self.sweep));
        out
    }

    /// Checks every section's values; stage-specific requirements are checked by the stage.
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.heads.validate()?;
        self.classifier.validate()?;
        self.explain.validate()?;
        self.sweep.validate()
    }
}

/// Defaults, then the file (if any), then `--seed`, then `--section.key value` overrides.
pub fn parse_config(file: Option<&Path>, text: Option<&str>, overrides: &[(String, String)], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let loaded;
    let body = match (file, text) {
        (Some(p), _) => {
            loaded = std::fs::read_to_string(p).map_err(|e| EclfError::io(p, e))?;
            Some(loaded.as_str())
        }
        (None, t) => t,
    };
    if let Some(body) = body {
        for a in parse_assignments(body)? {
            cfg.set(&format!("{}.{}", a.section, a.key), &a.value)?;
        }
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
