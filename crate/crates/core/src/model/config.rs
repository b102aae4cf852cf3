use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};

/// Which parts of the network are wired in. The default is the full model;
/// ablations switch pieces off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub modalities: PerModality<bool>,
    pub cross_attention: bool,
    pub gates: bool,
}

impl Default for Wiring {
    fn default() -> Self {
        Wiring {
            modalities: PerModality::from_fn(|_| true),
            cross_attention: true,
            gates: true,
        }
    }
}

impl Wiring {
    /// Active modalities in fusion order.
    pub fn active_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|&m| self.modalities[m])
            .collect()
    }

    /// Cross-attention needs both tokenized streams.
    pub fn uses_cross_attention(&self) -> bool {
        self.cross_attention && self.modalities.mri_ct && self.modalities.clinical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub ffn_multiplier: usize,
    pub head_hidden: usize,
    pub wiring: Wiring,
}

impl Default for SafnConfig {
    fn default() -> Self {
        SafnConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            dropout: 0.3,
            ffn_multiplier: 4,
            head_hidden: 64,
            wiring: Wiring::default(),
        }
    }
}

impl SafnConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_multiplier * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.ffn_multiplier == 0 || self.head_hidden == 0 {
            return Err(Error::Config(
                "ffn_multiplier and head_hidden must be positive".into(),
            ));
        }
        if self.wiring.active_modalities().is_empty() {
            return Err(Error::Config("at least one modality must be active".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = SafnConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.ffn_width(), 256);
    }

    #[test]
    fn rejects_indivisible_heads_and_bad_dropout() {
        let c = SafnConfig {
            d_model: 10,
            n_heads: 4,
            ..SafnConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SafnConfig {
            dropout: 1.0,
            ..SafnConfig::default()
        };
        assert!(c.validate().is_err());
        // prose value from the architecture description remains runnable
        let c = SafnConfig {
            dropout: 0.4,
            ..SafnConfig::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn cross_attention_needs_both_token_streams() {
        let mut w = Wiring::default();
        assert!(w.uses_cross_attention());
        w.modalities.clinical = false;
        assert!(!w.uses_cross_attention());
        assert_eq!(w.active_modalities().len(), 3);
    }
}
