//! Strict TOML configuration for a whole run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{Ablation, GudaConfig, MixWeights, NmtConfig};
use crate::align::ContrastiveConfig;
use crate::classify::ClassifierConfig;
use crate::error::{ensure, Error, Result};
use crate::select::{fingerprint, CedConfig, Method};
use crate::synth::{ScenarioConfig, SynthConfig, ToyEmbedderConfig};

/// Which side of the new domain comes with monolingual text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `X_new` is given and `Y_new` is selected from the target-language pool.
    GivenSourceMonotext,
    /// `Y_new` is given and `X_new` is selected from the source-language pool.
    GivenTargetMonotext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSettings {
    pub weights: MixWeights,
    pub ablation: Ablation,
    pub warm_start: bool,
    pub use_old_bitext: bool,
    pub dev_fraction: f64,
    pub disc_hidden: usize,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        let g = GudaConfig::default();
        AdaptSettings {
            weights: g.weights,
            ablation: g.ablation,
            warm_start: g.warm_start,
            use_old_bitext: g.use_old_bitext,
            dev_fraction: g.dev_fraction,
            disc_hidden: g.disc_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    /// Cluster counts swept by the negative-sampling ablation; empty skips it.
    pub k_values: Vec<usize>,
    /// Run the four loss subsets of the adaptation objective.
    pub losses: bool,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings { k_values: vec![1, 2, 3, 5, 7, 10], losses: true }
    }
}

/// Everything a run needs. Every `seed` inside the sections is replaced by
/// the top-level `seed` when the configuration is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub direction: Direction,
    /// Selection methods to run and report.
    pub methods: Vec<Method>,
    /// Selection whose output feeds adaptation.
    pub adapt_selection: Method,
    /// Sentences to select; 0 means the number of in-domain pool sentences.
    pub select_k: usize,
    pub synth: SynthConfig,
    pub scenario: ScenarioConfig,
    pub embedder: ToyEmbedderConfig,
    pub contrastive: ContrastiveConfig,
    pub classifier: ClassifierConfig,
    pub ced: CedConfig,
    pub nmt: NmtConfig,
    pub adapt: AdaptSettings,
    pub ablation: AblationSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = PipelineConfig {
            seed: 1,
            direction: Direction::GivenSourceMonotext,
            methods: Method::ALL.to_vec(),
            adapt_selection: Method::Ours,
            select_k: 0,
            synth: SynthConfig::default(),
            scenario: ScenarioConfig::default(),
            embedder: ToyEmbedderConfig::default(),
            contrastive: ContrastiveConfig::desk(),
            classifier: ClassifierConfig::desk(),
            ced: CedConfig::default(),
            nmt: NmtConfig::desk(),
            adapt: AdaptSettings::default(),
            ablation: AblationSettings::default(),
        };
        c.set_seed(c.seed);
        c
    }
}

/// Overlay `over` onto `base`, recursing into tables.
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

impl PipelineConfig {
    /// Parse a configuration. Keys left out keep the values of
    /// [`PipelineConfig::default`]; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut base = toml::Table::try_from(PipelineConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: PipelineConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Copy the top-level seed into every section and validate.
    pub fn resolved(mut self) -> Result<Self> {
        self.set_seed(self.seed);
        self.validate()?;
        Ok(self)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.embedder.lang_rotation_seed = seed;
        self.contrastive.seed = seed;
        self.classifier.seed = seed;
        self.ced.seed = seed;
        self.nmt.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.contrastive.validate()?;
        self.nmt.validate()?;
        self.adapt.weights.validate()?;
        ensure!(!self.methods.is_empty(), "methods must name at least one selection method");
        ensure!(
            self.methods.contains(&self.adapt_selection),
            "adapt_selection {} is not among the configured methods",
            self.adapt_selection
        );
        ensure!(self.scenario.new_domain < self.synth.num_domains, "scenario.new_domain is out of range");
        ensure!(self.select_k <= self.scenario.pool_size, "select_k exceeds the pool size");
        ensure!(self.ablation.k_values.iter().all(|&k| k >= 1), "ablation k values must be at least 1");
        if self.adapt.ablation.source() || self.adapt.ablation.target() {
            ensure!(self.scenario.new_mono >= 2, "adaptation needs new-domain monotext");
        }
        Ok(())
    }

    /// Short hash of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_toml())
    }

    pub fn guda(&self) -> GudaConfig {
        GudaConfig {
            nmt: self.nmt.clone(),
            weights: self.adapt.weights,
            ablation: self.adapt.ablation,
            use_old_bitext: self.adapt.use_old_bitext,
            warm_start: self.adapt.warm_start,
            dev_fraction: self.adapt.dev_fraction,
            disc_hidden: self.adapt.disc_hidden,
        }
    }
}
