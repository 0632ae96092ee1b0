//! Model hyperparameters and their key=value file form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::FrequencyWeighting;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_h: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Relation feature width after the d_h -> d_rel reduction.
    pub d_rel: usize,
    pub conv_kernel: usize,
    /// Bottleneck dims of the type-embedding MLP (down, then up).
    pub d_down: usize,
    pub d_up: usize,
    pub n_types: usize,
    pub vocab_size: usize,
    pub eps_ln: f64,
    /// Relation prediction task (auxiliary loss head).
    pub use_rp: bool,
    /// Token relation attention: extra cross-attention K/V slots from the
    /// convolved relation grid. Requires `use_rp`.
    pub use_tra: bool,
    /// Entity type attention: extra K/V slots from type embeddings in
    /// every self-attention layer and in cross-attention.
    pub use_eta: bool,
    /// Keep the type table out of the gradient path.
    pub freeze_type_embeddings: bool,
    /// Embed a generated source pointer as its encoder row rather than the
    /// raw token embedding.
    pub pointer_input_from_encoder: bool,
    pub frequency_weighting: FrequencyWeighting,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            d_ff: 128,
            d_rel: 32,
            conv_kernel: 3,
            d_down: 32,
            d_up: 64,
            n_types: 3,
            vocab_size: 2,
            eps_ln: 1e-5,
            use_rp: false,
            use_tra: false,
            use_eta: false,
            freeze_type_embeddings: false,
            pointer_input_from_encoder: true,
            frequency_weighting: FrequencyWeighting::Linear,
        }
    }
}

impl ModelConfig {
    /// Baseline with every auxiliary component switched off.
    pub fn with_flags(mut self, use_rp: bool, use_tra: bool, use_eta: bool) -> Self {
        self.use_rp = use_rp;
        self.use_tra = use_tra;
        self.use_eta = use_eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_h {} must be a positive multiple of n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if self.use_tra && !self.use_rp {
            return Err(Error::InvalidConfig(
                "use_tra requires use_rp: the relation task drives the relation features".into(),
            ));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.n_types == 0 {
            return Err(Error::InvalidConfig("n_types must be >= 1".into()));
        }
        for (name, v) in [
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("d_ff", self.d_ff),
            ("d_rel", self.d_rel),
            ("d_down", self.d_down),
            ("d_up", self.d_up),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.eps_ln > 0.0) {
            return Err(Error::InvalidConfig("eps_ln must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }

    /// Serializes to `key=value` lines in a fixed field order.
    pub fn to_kv(&self) -> String {
        let w = match self.frequency_weighting {
            FrequencyWeighting::Linear => "linear",
            FrequencyWeighting::Log => "log",
        };
        format!(
            "d_h={}\nn_layers_enc={}\nn_layers_dec={}\nn_heads={}\nd_ff={}\nd_rel={}\n\
             conv_kernel={}\nd_down={}\nd_up={}\nn_types={}\nvocab_size={}\neps_ln={}\n\
             use_rp={}\nuse_tra={}\nuse_eta={}\nfreeze_type_embeddings={}\n\
             pointer_input_from_encoder={}\nfrequency_weighting={}\n",
            self.d_h,
            self.n_layers_enc,
            self.n_layers_dec,
            self.n_heads,
            self.d_ff,
            self.d_rel,
            self.conv_kernel,
            self.d_down,
            self.d_up,
            self.n_types,
            self.vocab_size,
            self.eps_ln,
            self.use_rp,
            self.use_tra,
            self.use_eta,
            self.freeze_type_embeddings,
            self.pointer_input_from_encoder,
            w
        )
    }

    /// Applies `key=value` lines on top of `self`. Unknown keys fail.
    pub fn apply_kv(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected key=value"))?;
            self.set_field(key.trim(), value.trim())
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("{key}: {e}")))
        }
        match key {
            "d_h" => self.d_h = p(key, value)?,
            "n_layers_enc" => self.n_layers_enc = p(key, value)?,
            "n_layers_dec" => self.n_layers_dec = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "d_ff" => self.d_ff = p(key, value)?,
            "d_rel" => self.d_rel = p(key, value)?,
            "conv_kernel" => self.conv_kernel = p(key, value)?,
            "d_down" => self.d_down = p(key, value)?,
            "d_up" => self.d_up = p(key, value)?,
            "n_types" => self.n_types = p(key, value)?,
            "vocab_size" => self.vocab_size = p(key, value)?,
            "eps_ln" => self.eps_ln = p(key, value)?,
            "use_rp" => self.use_rp = p(key, value)?,
            "use_tra" => self.use_tra = p(key, value)?,
            "use_eta" => self.use_eta = p(key, value)?,
            "freeze_type_embeddings" => self.freeze_type_embeddings = p(key, value)?,
            "pointer_input_from_encoder" => self.pointer_input_from_encoder = p(key, value)?,
            "frequency_weighting" => {
                self.frequency_weighting = match value {
                    "linear" => FrequencyWeighting::Linear,
                    "log" => FrequencyWeighting::Log,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "frequency_weighting must be linear or log, got {other}"
                        )))
                    }
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig {
            d_h: 16,
            n_heads: 2,
            use_rp: true,
            use_tra: true,
            ..ModelConfig::default()
        };
        cfg.frequency_weighting = FrequencyWeighting::Log;
        let text = cfg.to_kv();
        let mut back = ModelConfig::default();
        back.apply_kv(&text, "mem").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn tra_without_rp_rejected() {
        let cfg = ModelConfig::default().with_flags(false, true, false);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_divisibility_checked() {
        let cfg = ModelConfig {
            d_h: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let mut cfg = ModelConfig::default();
        let err = cfg.apply_kv("d_h=8\nbogus=1\n", "cfg").unwrap_err().to_string();
        assert!(err.contains("cfg:2"), "{err}");
    }
}
