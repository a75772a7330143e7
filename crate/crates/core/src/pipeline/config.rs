//! Flat key=value run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::agent::{AgentConfig, BaselineMode};
use crate::rouge::RewardWeights;
use crate::textrank;
use crate::transformer::{ApplyLayers, ModelConfig};

use super::PipelineError;

/// Everything a run needs. Serialized as one `key=value` line per field;
/// every run writes its resolved copy next to its outputs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub capture_layer: usize,
    pub apply_layers: ApplyLayers,
    pub vocab_min_count: usize,
    /// Decode/teacher-forcing budget for the summary side.
    pub max_tgt: usize,
    pub supervised_epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub learning_rate: f64,
    pub rl_episodes: usize,
    pub joint_finetune: bool,
    pub agent: AgentConfig,
    pub reward_weights: RewardWeights,
    /// Validation-reward cadence during the RL phase, in episodes.
    pub eval_every: usize,
    /// TextRank sentences per extractive summary.
    pub summary_sentences: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 42,
            capture_layer: model.default_capture_layer(),
            model,
            apply_layers: ApplyLayers::All,
            vocab_min_count: 1,
            max_tgt: 16,
            supervised_epochs: 6,
            batch_size: 16,
            grad_accum: 4,
            learning_rate: 1.5e-4,
            rl_episodes: 3000,
            joint_finetune: true,
            agent: AgentConfig::default(),
            reward_weights: RewardWeights::default(),
            eval_every: 250,
            summary_sentences: textrank::DEFAULT_SUMMARY_SENTENCES,
        }
    }
}

impl RunConfig {
    /// Longest source prefix that still leaves room for SOS, SEP, the target
    /// budget and EOS.
    pub fn max_src(&self) -> usize {
        self.model.max_seq_len.saturating_sub(3 + self.max_tgt)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.agent
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(PipelineError::Config(
                "batch_size and grad_accum must be at least 1".into(),
            ));
        }
        if self.capture_layer >= self.model.num_layers {
            return Err(PipelineError::Config(format!(
                "capture_layer {} out of range for {} layers",
                self.capture_layer, self.model.num_layers
            )));
        }
        if self.max_src() == 0 {
            return Err(PipelineError::Config(format!(
                "max_seq_len {} leaves no room for source tokens at max_tgt {}",
                self.model.max_seq_len, self.max_tgt
            )));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let hidden = self
            .agent
            .hidden_sizes
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "num_layers={}", self.model.num_layers);
        let _ = writeln!(s, "num_heads={}", self.model.num_heads);
        let _ = writeln!(s, "d_model={}", self.model.d_model);
        let _ = writeln!(s, "d_ff={}", self.model.d_ff);
        let _ = writeln!(s, "vocab_size={}", self.model.vocab_size);
        let _ = writeln!(s, "max_seq_len={}", self.model.max_seq_len);
        let _ = writeln!(s, "dropout_rate={}", self.model.dropout_rate);
        let _ = writeln!(s, "capture_layer={}", self.capture_layer);
        let _ = writeln!(s, "apply_layers={}", self.apply_layers);
        let _ = writeln!(s, "vocab_min_count={}", self.vocab_min_count);
        let _ = writeln!(s, "max_tgt={}", self.max_tgt);
        let _ = writeln!(s, "supervised_epochs={}", self.supervised_epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "grad_accum={}", self.grad_accum);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "rl_episodes={}", self.rl_episodes);
        let _ = writeln!(s, "joint_finetune={}", self.joint_finetune);
        let _ = writeln!(s, "state_dim={}", self.agent.state_dim);
        let _ = writeln!(s, "agent_hidden={hidden}");
        let _ = writeln!(s, "entropy_coef={}", self.agent.entropy_coef);
        let _ = writeln!(s, "agent_learning_rate={}", self.agent.learning_rate);
        let _ = writeln!(s, "value_coef={}", self.agent.value_coef);
        let _ = writeln!(s, "baseline={}", self.agent.baseline);
        let _ = writeln!(s, "reward_w1={}", self.reward_weights.w1);
        let _ = writeln!(s, "reward_w2={}", self.reward_weights.w2);
        let _ = writeln!(s, "reward_wl={}", self.reward_weights.wl);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "summary_sentences={}", self.summary_sentences);
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_key_values()).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Parses a key=value file over the defaults. `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|message| PipelineError::Config(format!(
            "{}: {message}",
            path.display()
        )))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let mut w = (
            cfg.reward_weights.w1,
            cfg.reward_weights.w2,
            cfg.reward_weights.wl,
        );
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {raw}", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let e = |err: &dyn std::fmt::Display| format!("line {}: {key}: {err}", i + 1);
            match key {
                "seed" => cfg.seed = value.parse().map_err(|x| e(&x))?,
                "num_layers" => cfg.model.num_layers = value.parse().map_err(|x| e(&x))?,
                "num_heads" => cfg.model.num_heads = value.parse().map_err(|x| e(&x))?,
                "d_model" => cfg.model.d_model = value.parse().map_err(|x| e(&x))?,
                "d_ff" => cfg.model.d_ff = value.parse().map_err(|x| e(&x))?,
                "vocab_size" => cfg.model.vocab_size = value.parse().map_err(|x| e(&x))?,
                "max_seq_len" => cfg.model.max_seq_len = value.parse().map_err(|x| e(&x))?,
                "dropout_rate" => cfg.model.dropout_rate = value.parse().map_err(|x| e(&x))?,
                "capture_layer" => cfg.capture_layer = value.parse().map_err(|x| e(&x))?,
                "apply_layers" => cfg.apply_layers = value.parse().map_err(|x| e(&x))?,
                "vocab_min_count" => cfg.vocab_min_count = value.parse().map_err(|x| e(&x))?,
                "max_tgt" => cfg.max_tgt = value.parse().map_err(|x| e(&x))?,
                "supervised_epochs" => {
                    cfg.supervised_epochs = value.parse().map_err(|x| e(&x))?
                }
                "batch_size" => cfg.batch_size = value.parse().map_err(|x| e(&x))?,
                "grad_accum" => cfg.grad_accum = value.parse().map_err(|x| e(&x))?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|x| e(&x))?,
                "rl_episodes" => cfg.rl_episodes = value.parse().map_err(|x| e(&x))?,
                "joint_finetune" => cfg.joint_finetune = value.parse().map_err(|x| e(&x))?,
                "state_dim" => cfg.agent.state_dim = value.parse().map_err(|x| e(&x))?,
                "agent_hidden" => {
                    cfg.agent.hidden_sizes = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|x| e(&x))?
                }
                "entropy_coef" => cfg.agent.entropy_coef = value.parse().map_err(|x| e(&x))?,
                "agent_learning_rate" => {
                    cfg.agent.learning_rate = value.parse().map_err(|x| e(&x))?
                }
                "value_coef" => cfg.agent.value_coef = value.parse().map_err(|x| e(&x))?,
                "baseline" => {
                    cfg.agent.baseline = value.parse::<BaselineMode>().map_err(|x| e(&x))?
                }
                "reward_w1" => w.0 = value.parse().map_err(|x| e(&x))?,
                "reward_w2" => w.1 = value.parse().map_err(|x| e(&x))?,
                "reward_wl" => w.2 = value.parse().map_err(|x| e(&x))?,
                "eval_every" => cfg.eval_every = value.parse().map_err(|x| e(&x))?,
                "summary_sentences" => {
                    cfg.summary_sentences = value.parse().map_err(|x| e(&x))?
                }
                other => return Err(format!("line {}: unknown key {other}", i + 1)),
            }
        }
        cfg.reward_weights =
            RewardWeights::new(w.0, w.1, w.2).map_err(|e| format!("reward weights: {e}"))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_key_values() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.model.d_model = 32;
        cfg.agent.hidden_sizes = vec![8, 4];
        cfg.joint_finetune = false;
        let text = cfg.to_key_values();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.model.d_model, 32);
        assert_eq!(parsed.agent.hidden_sizes, vec![8, 4]);
        assert!(!parsed.joint_finetune);
        assert_eq!(parsed.to_key_values(), text);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("bogus=1").unwrap_err();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored" () {
        let cfg = RunConfig::parse("# a comment\n\nseed=9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn bad_reward_weights_fail() {
        assert!(RunConfig::parse("reward_w1=0.9\nreward_w2=0.9\nreward_wl=0.9").is_err());
    }

    #[test]
    fn max_src_budget() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.max_src(), 64 - 3 - 16);
        assert!(cfg.validate().is_ok());
    }
}
