use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Architecture hyper-parameters shared by the vanilla and knowledge encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Maximum number of real candidate descriptions per example.
    pub n_max: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    /// Std of the normal initializer for freshly created weights.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_init_std() -> f64 {
    0.02
}

fn default_eps() -> f64 {
    1e-12
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn: 64,
            vocab_size: 64,
            max_len: 32,
            n_max: 64,
            dropout: 0.0,
            seed: 0,
            init_std: default_init_std(),
            layer_norm_eps: default_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("n_max", self.n_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(ModelError::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_heads_not_dividing_hidden() {
        let c = ModelConfig {
            hidden: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"layers":1,"hidden":8,"heads":2,"ffn":16,"vocab_size":10,"max_len":8,"n_max":4}"#,
        )
        .unwrap();
        assert_eq!(c.layer_norm_eps, 1e-12);
        assert_eq!(c.dropout, 0.0);
    }
}
