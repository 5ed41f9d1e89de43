//! Model configuration and adapted-site identifiers.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Numeric precision a model was built with; must match the `Real`
/// instantiation used to load it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(
                "d_model must be a nonzero multiple of n_heads".into(),
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(ModelError::InvalidConfig(
                "n_layers, d_ff, and max_seq must be nonzero".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical ordering of the adapted projection sites: Q then V per layer.
    pub fn sites(&self) -> Vec<SiteId> {
        let mut out = Vec::with_capacity(self.n_layers * 2);
        for layer in 0..self.n_layers {
            out.push(SiteId { layer, proj: Proj::Q });
            out.push(SiteId { layer, proj: Proj::V });
        }
        out
    }

    pub fn n_sites(&self) -> usize {
        self.n_layers * 2
    }
}

/// Which projection of which layer an adapter delta applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub proj: Proj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Proj {
    #[serde(rename = "q")]
    Q,
    #[serde(rename = "v")]
    V,
}

impl SiteId {
    /// Index in the canonical site order.
    pub fn index(&self) -> usize {
        self.layer * 2
            + match self.proj {
                Proj::Q => 0,
                Proj::V => 1,
            }
    }

    pub fn name(&self) -> String {
        match self.proj {
            Proj::Q => format!("layer.{}.wq", self.layer),
            Proj::V => format!("layer.{}.wv", self.layer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_order_is_q_then_v_per_layer() {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq: 4,
            precision: Precision::F32,
        };
        let sites = cfg.sites();
        assert_eq!(sites.len(), 4);
        assert_eq!(sites[0], SiteId { layer: 0, proj: Proj::Q });
        assert_eq!(sites[3], SiteId { layer: 1, proj: Proj::V });
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(s.index(), i);
        }
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 10,
            n_layers: 1,
            n_heads: 4,
            d_ff: 16,
            max_seq: 4,
            precision: Precision::F32,
        };
        assert!(cfg.validate().is_err());
    }
}
