//! Pipeline configuration file (TOML). Every table and key is optional;
//! missing entries take the defaults below.
//!
//! ```toml
//! seed = 0
//!
//! [data]            # synthetic corpus
//! count = 2000
//! long_fraction = 0.5
//! attr_offset = "mixed"   # early | late | mixed
//! eval_count = 200
//!
//! [text]            # teacher text tower (absolute positions)
//! d_model = 64
//! n_heads = 4
//! n_layers = 4
//! context = 77
//! projection_dim = 64
//! scheme = { kind = "absolute" }
//!
//! [image]
//! patch_size = 4
//! n_layers = 2
//!
//! [teacher]
//! epochs = 3
//! batch_size = 32
//! learning_rate = 1e-3
//!
//! [distill]
//! student_scheme = "rope"
//! loss_kind = "cosine"    # cosine | l2 | mse
//! epochs = 6
//!
//! [expand]
//! scheme = "rope_ntk"
//! t_g = 248
//! alpha = 8.0
//! lambda = 0.5
//! vision_trainable = true
//!
//! [eval]
//! ks = [1, 5, 10]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AttrOffset, SynthConfig};
use crate::encoder::{ImageConfig, TextConfig};
use crate::error::{Error, Result};
use crate::training::{DistillConfig, ExpandConfig, TeacherConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub long_fraction: f64,
    pub attr_offset: AttrOffset,
    /// Size of the held-out evaluation corpus.
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 2000,
            long_fraction: 0.5,
            attr_offset: AttrOffset::Mixed,
            eval_count: 200,
        }
    }
}

impl DataConfig {
    pub fn synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            count: self.count,
            long_fraction: self.long_fraction,
            attr_offset: self.attr_offset,
        }
    }

    /// Held-out corpus drawn from a seed disjoint from the training one.
    pub fn eval_synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed: held_out_seed(seed),
            count: self.eval_count,
            ..self.synth(seed)
        }
    }
}

/// Seed of the held-out corpus that accompanies a training corpus.
pub fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x5E_ED0F_E7A1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![1, 5, 10] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub text: TextConfig,
    pub image: ImageConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub expand: ExpandConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // The top-level seed drives every stage unless a stage sets its own.
        let defaults = PipelineConfig::default();
        if config.teacher.seed == defaults.teacher.seed {
            config.teacher.seed = config.seed;
        }
        if config.distill.seed == defaults.distill.seed {
            config.distill.seed = config.seed;
        }
        if config.expand.seed == defaults.expand.seed {
            config.expand.seed = config.seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configurations always serialize")
    }

    /// Sets the top-level seed and every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.teacher.seed = seed;
        self.distill.seed = seed;
        self.expand.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.image.validate()?;
        self.expand.validate()?;
        if self.data.count == 0 || self.data.eval_count == 0 {
            return Err(Error::Config("data.count and data.eval_count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.data.long_fraction) {
            return Err(Error::Config(format!(
                "data.long_fraction must lie in [0, 1], got {}",
                self.data.long_fraction
            )));
        }
        if self.eval.ks.is_empty() {
            return Err(Error::Config("eval.ks must list at least one cutoff".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::SchemeKind;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("config.rs");
        let example: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| format!("{}\n", l.trim_start_matches("//!").trim_start()))
            .collect();
        let c = PipelineConfig::from_toml(&example).unwrap();
        assert_eq!(c.expand.scheme, SchemeKind::RopeNtk);
        assert_eq!(c.eval.ks, vec![1, 5, 10]);
    }

    #[test]
    fn seed_propagates_and_round_trips() {
        let c = PipelineConfig::from_toml("seed = 9\n[expand]\nt_g = 154\n").unwrap();
        assert_eq!((c.teacher.seed, c.distill.seed, c.expand.seed), (9, 9, 9));
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in ["[expand]\nlambda = 1.5", "[text]\nn_heads = 5", "bogus = 1", "[eval]\nks = []"] {
            assert!(matches!(PipelineConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
