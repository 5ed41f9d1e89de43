//! Frozen transformer weights: init, checksum, and archive round-trip.

use std::path::Path;

use serde_json::json;

use super::config::{ModelConfig, Precision};
use super::ModelError;
use crate::numerics::Matrix;
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor_io::TensorArchive;

#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

/// Pre-norm decoder-only transformer with learned absolute positions and a
/// weight-tied output projection (`tok_emb` doubles as the unembedding).
#[derive(Debug, Clone)]
pub struct TransformerWeights<T> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
}

impl<T: Real> TransformerWeights<T> {
    /// Seeded random init: gaussian(0.02) embeddings and input projections,
    /// zero residual projections (`wo`, `w2`), unit layer-norm gains.
    pub fn init(mut config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.precision = precision_of::<T>();
        config.validate()?;
        let d = config.d_model;
        let mut rng = SplitMix64::derive(seed, 0x696e_6974); // "init"
        let mut gauss = |rows: usize, cols: usize, std: f64| -> Matrix<T> {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(rng.next_gaussian() * std))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };

        let tok_emb = gauss(config.vocab_size, d, 0.02);
        let pos_emb = gauss(config.max_seq, d, 0.02);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_g: vec![T::ONE; d],
                ln1_b: vec![T::ZERO; d],
                wq: gauss(d, d, 0.02),
                wk: gauss(d, d, 0.02),
                wv: gauss(d, d, 0.02),
                wo: Matrix::zeros(d, d),
                ln2_g: vec![T::ONE; d],
                ln2_b: vec![T::ZERO; d],
                w1: gauss(d, config.d_ff, 0.02),
                w2: Matrix::zeros(config.d_ff, d),
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: vec![T::ONE; d],
            lnf_b: vec![T::ZERO; d],
        })
    }

    /// Deterministic fingerprint over every tensor; pool training must leave
    /// this unchanged.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::fnv1a64_init();
        let mut eat = |vals: &[T]| {
            let mut bytes = Vec::with_capacity(vals.len() * 8);
            for v in vals {
                bytes.extend_from_slice(&v.to_bits_u64().to_le_bytes());
            }
            h = crate::fnv1a64_update(h, &bytes);
        };
        eat(self.tok_emb.data());
        eat(self.pos_emb.data());
        for l in &self.layers {
            eat(&l.ln1_g);
            eat(&l.ln1_b);
            eat(l.wq.data());
            eat(l.wk.data());
            eat(l.wv.data());
            eat(l.wo.data());
            eat(&l.ln2_g);
            eat(&l.ln2_b);
            eat(l.w1.data());
            eat(l.w2.data());
        }
        eat(&self.lnf_g);
        eat(&self.lnf_b);
        h
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new(json!({
            "kind": "transformer",
            "config": self.config,
        }));
        a.push_matrix("tok_emb", &self.tok_emb);
        a.push_matrix("pos_emb", &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            a.push_vector(&format!("layer.{i}.ln1.g"), &l.ln1_g);
            a.push_vector(&format!("layer.{i}.ln1.b"), &l.ln1_b);
            a.push_matrix(&format!("layer.{i}.wq"), &l.wq);
            a.push_matrix(&format!("layer.{i}.wk"), &l.wk);
            a.push_matrix(&format!("layer.{i}.wv"), &l.wv);
            a.push_matrix(&format!("layer.{i}.wo"), &l.wo);
            a.push_vector(&format!("layer.{i}.ln2.g"), &l.ln2_g);
            a.push_vector(&format!("layer.{i}.ln2.b"), &l.ln2_b);
            a.push_matrix(&format!("layer.{i}.w1"), &l.w1);
            a.push_matrix(&format!("layer.{i}.w2"), &l.w2);
        }
        a.push_vector("lnf.g", &self.lnf_g);
        a.push_vector("lnf.b", &self.lnf_b);
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(
            a.config
                .get("config")
                .cloned()
                .ok_or_else(|| ModelError::InvalidConfig("archive missing config".into()))?,
        )
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        if config.precision != precision_of::<T>() {
            return Err(ModelError::InvalidConfig(format!(
                "archive precision {:?} does not match requested scalar type",
                config.precision
            )));
        }
        let d = config.d_model;
        let tok_emb = a.matrix_expect("tok_emb", config.vocab_size, d)?;
        let pos_emb = a.matrix_expect("pos_emb", config.max_seq, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_g: a.vector(&format!("layer.{i}.ln1.g"))?,
                ln1_b: a.vector(&format!("layer.{i}.ln1.b"))?,
                wq: a.matrix_expect(&format!("layer.{i}.wq"), d, d)?,
                wk: a.matrix_expect(&format!("layer.{i}.wk"), d, d)?,
                wv: a.matrix_expect(&format!("layer.{i}.wv"), d, d)?,
                wo: a.matrix_expect(&format!("layer.{i}.wo"), d, d)?,
                ln2_g: a.vector(&format!("layer.{i}.ln2.g"))?,
                ln2_b: a.vector(&format!("layer.{i}.ln2.b"))?,
                w1: a.matrix_expect(&format!("layer.{i}.w1"), d, config.d_ff)?,
                w2: a.matrix_expect(&format!("layer.{i}.w2"), config.d_ff, d)?,
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: a.vector("lnf.g")?,
            lnf_b: a.vector("lnf.b")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_archive().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_archive(&TensorArchive::read(path)?)
    }
}

pub fn precision_of<T: Real>() -> Precision {
    match T::DTYPE {
        crate::real::Dtype::F32 => Precision::F32,
        crate::real::Dtype::F64 => Precision::F64,
    }
}
