//! Experiment configuration: one TOML file describing the corpus, model
//! sizes, pretraining, and joint training.
//!
//! Every field has a documented default; only the `[experiment]` section
//! (name, output directory, seed) is mandatory. Unknown keys anywhere are
//! rejected so typos fail loudly. The single experiment seed is propagated
//! into every training stage — stages decorrelate their random streams
//! internally, so one seed fully determines a run.

use crate::asr::{AsrConfig, AsrPretrainConfig};
use crate::blocks::BlockConfig;
use crate::corpus::{CorpusConfig, FEATURE_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::speaker::{SpeakerConfig, SpeakerPretrainConfig};
use crate::train::TrainConfig;
use crate::tts::{TtsConfig, TtsPretrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Identity of a run: where artifacts go and which seed drives everything.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Directory name for this run's artifacts (no path separators).
    pub name: String,
    /// Parent directory; all artifacts live under `out_dir/name`.
    pub out_dir: PathBuf,
    /// Master seed for corpus generation and every training stage.
    pub seed: u64,
}

/// Architecture sizes shared by the recognizer and synthesizer, plus the
/// (smaller) speaker embedder.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Transformer width of the recognizer and synthesizer.
    pub model_dim: usize,
    pub head_count: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Recognizer frame-stacking factor.
    pub subsample: usize,
    /// Recognizer decode-length cap.
    pub max_decode_len: usize,
    /// Speaker-embedder width (its feed-forward width is twice this, one
    /// encoder block).
    pub speaker_model_dim: usize,
    pub speaker_pool_dim: usize,
    /// Dimension of the speaker embedding consumed by the synthesizer.
    pub speaker_embed_dim: usize,
    /// Hidden width of the pitch/energy/duration predictors.
    pub variance_hidden: usize,
    pub postnet_hidden: usize,
    /// Post-net convolution width; must be odd.
    pub postnet_kernel: usize,
    /// Cap on predicted per-token durations in free-running synthesis.
    pub max_duration: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            model_dim: 64,
            head_count: 2,
            ff_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            subsample: 2,
            max_decode_len: 64,
            speaker_model_dim: 32,
            speaker_pool_dim: 16,
            speaker_embed_dim: 16,
            variance_hidden: 32,
            postnet_hidden: 32,
            postnet_kernel: 5,
            max_duration: 64,
        }
    }
}

/// Settings for the three supervised pretraining stages.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub speaker: SpeakerPretrainConfig,
    pub tts: TtsPretrainConfig,
    pub asr: AsrPretrainConfig,
}

/// The complete configuration of one experiment.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub joint: TrainConfig,
}

impl ExperimentConfig {
    /// Parses a TOML document, propagates the experiment seed into every
    /// stage, and validates the result.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and parses the file at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::missing(format!("config file {} does not exist", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_toml(&text)
    }

    /// One seed drives the whole experiment; each stage decorrelates its
    /// own random stream from it internally.
    fn propagate_seed(&mut self) {
        let seed = self.experiment.seed;
        self.pretrain.speaker.seed = seed;
        self.pretrain.tts.seed = seed;
        self.pretrain.asr.seed = seed;
        self.joint.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.experiment.name;
        if name.is_empty() {
            return Err(Error::config("experiment.name must be non-empty"));
        }
        if name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::config("experiment.name must be a plain directory name"));
        }
        self.corpus.validate()?;
        self.joint.validate()?;
        self.speaker_config().validate()?;
        self.tts_config().validate()?;
        self.asr_config().validate()?;
        for (stage, epochs, batch) in [
            ("speaker", self.pretrain.speaker.epochs, self.pretrain.speaker.batch_size),
            ("tts", self.pretrain.tts.epochs, self.pretrain.tts.batch_size),
            ("asr", self.pretrain.asr.epochs, self.pretrain.asr.batch_size),
        ] {
            if epochs == 0 || batch == 0 {
                return Err(Error::config(format!(
                    "pretrain.{stage}: epochs and batch_size must be positive"
                )));
            }
        }
        Ok(())
    }

    /// The canonical rendering of the effective configuration — every field
    /// with its resolved value.
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the effective configuration; stamped into checkpoints and
    /// reports so artifacts can be traced to the settings that made them.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.effective_toml().as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Directory all of this experiment's artifacts live under.
    pub fn dir(&self) -> PathBuf {
        self.experiment.out_dir.join(&self.experiment.name)
    }

    pub fn speaker_config(&self) -> SpeakerConfig {
        SpeakerConfig {
            block: BlockConfig {
                model_dim: self.model.speaker_model_dim,
                head_count: self.model.head_count,
                ff_dim: 2 * self.model.speaker_model_dim,
                layer_count: 1,
            },
            pool_dim: self.model.speaker_pool_dim,
            embed_dim: self.model.speaker_embed_dim,
            class_count: self.corpus.speakers,
        }
    }

    pub fn tts_config(&self) -> TtsConfig {
        TtsConfig {
            vocab_size: VOCAB_SIZE,
            feature_dim: FEATURE_DIM,
            speaker_dim: self.model.speaker_embed_dim,
            encoder: self.block(self.model.encoder_layers),
            decoder: self.block(self.model.decoder_layers),
            variance_hidden: self.model.variance_hidden,
            postnet_hidden: self.model.postnet_hidden,
            postnet_kernel: self.model.postnet_kernel,
            max_duration: self.model.max_duration,
        }
    }

    pub fn asr_config(&self) -> AsrConfig {
        AsrConfig {
            vocab_size: VOCAB_SIZE,
            feature_dim: FEATURE_DIM,
            subsample: self.model.subsample,
            encoder: self.block(self.model.encoder_layers),
            decoder: self.block(self.model.decoder_layers),
            max_decode_len: self.model.max_decode_len,
        }
    }

    fn block(&self, layers: usize) -> BlockConfig {
        BlockConfig {
            model_dim: self.model.model_dim,
            head_count: self.model.head_count,
            ff_dim: self.model.ff_dim,
            layer_count: layers,
        }
    }
}

/// Directory-safe name for an ablation variant of joint training.
pub fn variant_name(use_speaker_consistency: bool, use_stepwise: bool) -> &'static str {
    match (use_speaker_consistency, use_stepwise) {
        (true, true) => "proposed",
        (false, true) => "no-sc",
        (true, false) => "no-stepwise",
        (false, false) => "conventional",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[experiment]
name = "demo"
out_dir = "runs"
seed = 7
"#;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.corpus.speakers, 4);
        assert_eq!(cfg.corpus.paired, 200);
        assert_eq!(cfg.corpus.unpaired, 800);
        assert_eq!(cfg.model.model_dim, 64);
        assert_eq!(cfg.joint.alpha, 0.1);
        assert!(cfg.joint.use_speaker_consistency && cfg.joint.use_stepwise);
        assert_eq!(cfg.dir(), PathBuf::from("runs/demo"));
    }

    #[test]
    fn the_seed_reaches_every_stage() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.pretrain.speaker.seed, 7);
        assert_eq!(cfg.pretrain.tts.seed, 7);
        assert_eq!(cfg.pretrain.asr.seed, 7);
        assert_eq!(cfg.joint.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let text = format!("{MINIMAL}\n[joint]\nlerning_rate = 0.1\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("lerning_rate"), "error does not name the key: {err}");
    }

    #[test]
    fn missing_required_keys_are_rejected_by_name() {
        let text = "[experiment]\nname = \"x\"\nout_dir = \"runs\"\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("seed"), "error does not name the key: {err}");
    }

    #[test]
    fn effective_dump_reparses_to_the_same_config() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.effective_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let reordered = "\n[experiment]\nseed = 7\nout_dir = \"runs\"\nname = \"demo\"\n";
        let b = ExperimentConfig::from_toml(reordered).unwrap();
        assert_eq!(a.hash(), b.hash());

        let c = ExperimentConfig::from_toml(&MINIMAL.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bad_names_and_bad_sizes_are_config_errors() {
        let bad_name = MINIMAL.replace("\"demo\"", "\"a/b\"");
        assert!(ExperimentConfig::from_toml(&bad_name).is_err());

        let bad_kernel = format!("{MINIMAL}\n[model]\npostnet_kernel = 4\n");
        assert!(ExperimentConfig::from_toml(&bad_kernel).is_err());

        let bad_alpha = format!("{MINIMAL}\n[joint]\nalpha = -1.0\n");
        assert!(ExperimentConfig::from_toml(&bad_alpha).is_err());
    }

    #[test]
    fn variant_names_cover_the_ablation_grid() {
        assert_eq!(variant_name(true, true), "proposed");
        assert_eq!(variant_name(false, true), "no-sc");
        assert_eq!(variant_name(true, false), "no-stepwise");
        assert_eq!(variant_name(false, false), "conventional");
        let names = [
            variant_name(true, true),
            variant_name(false, true),
            variant_name(true, false),
            variant_name(false, false),
        ];
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn seed_is_not_configurable_per_stage() {
        // A per-stage seed key must be rejected: the experiment seed is the
        // single source of randomness.
        let text = format!("{MINIMAL}\n[pretrain.asr]\nseed = 3\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
