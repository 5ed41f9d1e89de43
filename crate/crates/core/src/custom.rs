//! Device-server customization: user embedding, alphas-only request,
//! server-side blend, and the deployment package.
//!
//! The only user-derived data that crosses the device-to-server boundary is
//! the N-vector of blend weights. Requests are length-prefixed UTF-8 JSON
//! with every variable-width value rendered at fixed width (alphas as
//! 16-digit hex of their IEEE-754 bits), so the serialized size depends on N
//! alone and leaks nothing about the customization set. See PROTOCOL.md at
//! the repository root for the frozen field layout.

use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapters::{
    alpha_from_embedding, blend_customized, AdapterError, BaseAdapterPool, BlendWeights,
    CustomizedAdapter, IndicatorSet, Provenance,
};
use crate::hybrid::{
    build_prototypes, calibrate_threshold, max_softmax_score, output_signature, HybridError,
    PrototypeSet, Scorer, SignatureSource,
};
use crate::model::{
    first_layer_queries, greedy_decode, Decoded, DeltaSet, ModelError, TransformerWeights,
};
use crate::numerics::Matrix;
use crate::real::Real;
use crate::tensor_io::{TensorArchive, TensorIoError};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("protocol version {got} unsupported (expected {expected})")]
    Version { got: u32, expected: u32 },
    #[error("base-count mismatch: request has {request}, pool has {pool}")]
    CountMismatch { request: usize, pool: usize },
    #[error("pool checksum mismatch: client {client}, server {server} (client/server pool skew)")]
    ChecksumMismatch { client: String, server: String },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("customization set is empty")]
    EmptySet,
    #[error("package rejected: {0}")]
    PackageRejected(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
}

/// The handful of user examples defining the target task. Lives on the
/// device only; no operation here ever serializes it into an outbound
/// message.
#[derive(Debug, Clone)]
pub struct CustomizationSet {
    examples: Vec<(Vec<u32>, Vec<u32>)>,
}

impl CustomizationSet {
    pub fn new(examples: Vec<(Vec<u32>, Vec<u32>)>) -> Result<Self, ProtocolError> {
        if examples.is_empty() {
            return Err(ProtocolError::EmptySet);
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn prompts(&self) -> Vec<Vec<u32>> {
        self.examples.iter().map(|(p, _)| p.clone()).collect()
    }

    pub fn examples(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.examples
    }
}

/// The alphas-only customization request. Exactly these five fields.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomizationRequest {
    pub protocol_version: u32,
    /// Opaque token identifying the deployed indicator/pool pairing; defined
    /// by this protocol as the 16-hex-digit pool checksum.
    pub client_id: String,
    pub n_bases: usize,
    pub alphas: Vec<f64>,
    pub normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct WireRequest {
    protocol_version: u32,
    client_id: String,
    n_bases: usize,
    /// IEEE-754 bit patterns, 16 lowercase hex digits each.
    alphas: Vec<String>,
    normalized: bool,
}

impl CustomizationRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let wire = WireRequest {
            protocol_version: self.protocol_version,
            client_id: self.client_id.clone(),
            n_bases: self.n_bases,
            alphas: self.alphas.iter().map(|a| format!("{:016x}", a.to_bits())).collect(),
            normalized: self.normalized,
        };
        serde_json::to_vec(&wire).expect("request serialization")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let wire: WireRequest = serde_json::from_slice(bytes)
            .map_err(|e| ProtocolError::Malformed(format!("request json: {e}")))?;
        if wire.protocol_version != PROTOCOL_VERSION {
            return Err(ProtocolError::Version {
                got: wire.protocol_version,
                expected: PROTOCOL_VERSION,
            });
        }
        if wire.alphas.len() != wire.n_bases {
            return Err(ProtocolError::Malformed(format!(
                "n_bases {} but {} alphas",
                wire.n_bases,
                wire.alphas.len()
            )));
        }
        let mut alphas = Vec::with_capacity(wire.alphas.len());
        for hexed in &wire.alphas {
            let bits = u64::from_str_radix(hexed, 16)
                .map_err(|e| ProtocolError::Malformed(format!("alpha hex: {e}")))?;
            let v = f64::from_bits(bits);
            if !v.is_finite() {
                return Err(ProtocolError::Malformed("non-finite alpha".into()));
            }
            alphas.push(v);
        }
        Ok(Self {
            protocol_version: wire.protocol_version,
            client_id: wire.client_id,
            n_bases: wire.n_bases,
            alphas,
            normalized: wire.normalized,
        })
    }
}

/// Length-prefixed framing shared by both wire messages.
pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)
}

pub fn read_frame(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut payload = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

/// Customized adapter plus routing prototypes and calibrated threshold.
#[derive(Debug, Clone)]
pub struct DeploymentPackage<T> {
    pub adapter: CustomizedAdapter<T>,
    pub prototypes: PrototypeSet<T>,
    pub threshold: f64,
    pub pool_checksum: u64,
    pub protocol_version: u32,
}

impl<T: Real> DeploymentPackage<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut archive = TensorArchive::new(json!({
            "kind": "deployment_package",
            "protocol_version": self.protocol_version,
            "pool_checksum": format!("{:016x}", self.pool_checksum),
            "threshold": self.threshold,
            "d_model": self.adapter.d_model,
            "effective_rank": self.adapter.effective_rank,
            "sites": self.adapter.sites,
            "alphas": self.adapter.provenance.alphas,
            "n_prototypes": self.prototypes.len(),
        }));
        for (i, (a, b)) in self.adapter.stacks.iter().enumerate() {
            archive.push_matrix(&format!("site.{i}.a_stack"), a);
            archive.push_matrix(&format!("site.{i}.b_stack"), b);
        }
        for (i, sig) in self.prototypes.signatures.iter().enumerate() {
            archive.push_vector(&format!("prototype.{i}"), sig);
        }
        archive.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let archive = TensorArchive::from_bytes(bytes)?;
        let cfg = &archive.config;
        let version = cfg
            .get("protocol_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ProtocolError::Malformed("missing protocol_version".into()))?
            as u32;
        if version != PROTOCOL_VERSION {
            return Err(ProtocolError::Version {
                got: version,
                expected: PROTOCOL_VERSION,
            });
        }
        let checksum_hex = cfg
            .get("pool_checksum")
            .and_then(|v| v.as_str())
            .ok_or_else(|| ProtocolError::Malformed("missing pool_checksum".into()))?;
        let pool_checksum = u64::from_str_radix(checksum_hex, 16)
            .map_err(|e| ProtocolError::Malformed(format!("pool_checksum: {e}")))?;
        let threshold = cfg
            .get("threshold")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| ProtocolError::Malformed("missing threshold".into()))?;
        let d_model = cfg
            .get("d_model")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ProtocolError::Malformed("missing d_model".into()))? as usize;
        let effective_rank = cfg
            .get("effective_rank")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ProtocolError::Malformed("missing effective_rank".into()))?
            as usize;
        let sites: Vec<crate::model::SiteId> = serde_json::from_value(
            cfg.get("sites")
                .cloned()
                .ok_or_else(|| ProtocolError::Malformed("missing sites".into()))?,
        )
        .map_err(|e| ProtocolError::Malformed(format!("sites: {e}")))?;
        let alphas: Vec<f64> = serde_json::from_value(
            cfg.get("alphas")
                .cloned()
                .ok_or_else(|| ProtocolError::Malformed("missing alphas".into()))?,
        )
        .map_err(|e| ProtocolError::Malformed(format!("alphas: {e}")))?;
        let n_protos = cfg
            .get("n_prototypes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ProtocolError::Malformed("missing n_prototypes".into()))?
            as usize;

        let mut stacks = Vec::with_capacity(sites.len());
        for i in 0..sites.len() {
            let a: Matrix<T> = archive.matrix_expect(&format!("site.{i}.a_stack"), d_model, effective_rank)?;
            let b: Matrix<T> = archive.matrix_expect(&format!("site.{i}.b_stack"), effective_rank, d_model)?;
            stacks.push((a, b));
        }
        let mut signatures = Vec::with_capacity(n_protos);
        for i in 0..n_protos {
            signatures.push(archive.vector(&format!("prototype.{i}"))?);
        }
        Ok(Self {
            adapter: CustomizedAdapter {
                sites,
                stacks,
                d_model,
                effective_rank,
                provenance: Provenance {
                    alphas,
                    pool_checksum,
                },
            },
            prototypes: PrototypeSet { signatures },
            threshold,
            pool_checksum,
            protocol_version: version,
        })
    }
}

/// Mean of the first-layer query embeddings over the customization prompts
/// (answers excluded).
pub fn user_embedding<T: Real>(
    w: &TransformerWeights<T>,
    dc: &CustomizationSet,
) -> Result<Vec<T>, ProtocolError> {
    let d = w.config.d_model;
    let inv = T::ONE / T::from_f64(dc.len() as f64);
    let mut out = vec![T::ZERO; d];
    for (prompt, _) in dc.examples() {
        let q = first_layer_queries(w, prompt)?;
        for (o, &v) in out.iter_mut().zip(q.iter()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// What the device holds after provisioning: frozen base weights, the
/// indicator set, and the fingerprint of the pool file they came from.
/// The applied adapter swaps atomically under a read-write lock.
pub struct DeviceContext<T> {
    pub weights: Arc<TransformerWeights<T>>,
    pub indicators: IndicatorSet<T>,
    pub pool_checksum: u64,
    pub normalize_alphas: bool,
    applied: RwLock<Option<Arc<AppliedPackage<T>>>>,
}

#[derive(Debug)]
pub struct AppliedPackage<T> {
    pub delta: DeltaSet<T>,
    pub prototypes: PrototypeSet<T>,
    pub threshold: f64,
    pub pool_checksum: u64,
}

impl<T: Real> DeviceContext<T> {
    pub fn new(
        weights: Arc<TransformerWeights<T>>,
        indicators: IndicatorSet<T>,
        pool_checksum: u64,
        normalize_alphas: bool,
    ) -> Self {
        Self {
            weights,
            indicators,
            pool_checksum,
            normalize_alphas,
            applied: RwLock::new(None),
        }
    }

    /// The opaque client token: hex fingerprint of the deployed pool file.
    pub fn client_id(&self) -> String {
        format!("{:016x}", self.pool_checksum)
    }

    /// Builds the alphas-only request from the customization set. Nothing
    /// else derived from the set enters the message.
    pub fn make_request(&self, dc: &CustomizationSet) -> Result<CustomizationRequest, ProtocolError> {
        let q_c = user_embedding(&self.weights, dc)?;
        self.make_request_from_embedding(&q_c)
    }

    pub fn make_request_from_embedding(&self, q_c: &[T]) -> Result<CustomizationRequest, ProtocolError> {
        let bw = alpha_from_embedding(&self.indicators, q_c, self.normalize_alphas)?;
        Ok(CustomizationRequest {
            protocol_version: PROTOCOL_VERSION,
            client_id: self.client_id(),
            n_bases: self.indicators.n_bases,
            alphas: bw.alphas.iter().map(|a| a.to_f64()).collect(),
            normalized: bw.normalized,
        })
    }

    /// Validates and atomically installs a deployment package. On any
    /// rejection the previously applied adapter stays in place.
    pub fn apply_package(&self, pkg: &DeploymentPackage<T>) -> Result<(), ProtocolError> {
        if pkg.protocol_version != PROTOCOL_VERSION {
            return Err(ProtocolError::Version {
                got: pkg.protocol_version,
                expected: PROTOCOL_VERSION,
            });
        }
        if pkg.pool_checksum != self.pool_checksum {
            return Err(ProtocolError::ChecksumMismatch {
                client: format!("{:016x}", self.pool_checksum),
                server: format!("{:016x}", pkg.pool_checksum),
            });
        }
        let delta = pkg
            .adapter
            .to_delta_set(&self.weights.config)
            .map_err(|e| ProtocolError::PackageRejected(format!("adapter shape: {e}")))?;
        let vocab = self.weights.config.vocab_size;
        if pkg.prototypes.is_empty()
            || pkg.prototypes.signatures.iter().any(|s| s.len() != vocab)
        {
            return Err(ProtocolError::PackageRejected(
                "prototype dimensions do not match vocabulary".into(),
            ));
        }
        let installed = AppliedPackage {
            delta,
            prototypes: PrototypeSet {
                signatures: pkg.prototypes.signatures.clone(),
            },
            threshold: pkg.threshold,
            pool_checksum: pkg.pool_checksum,
        };
        *self.applied.write().expect("device adapter lock") = Some(Arc::new(installed));
        Ok(())
    }

    pub fn current_package(&self) -> Option<Arc<AppliedPackage<T>>> {
        self.applied.read().expect("device adapter lock").clone()
    }

    /// Greedy decode with whatever adapter is currently applied.
    pub fn decode(
        &self,
        prompt: &[u32],
        max_new: usize,
        stop_token: Option<u32>,
    ) -> Result<Decoded<T>, ProtocolError> {
        let current = self.current_package();
        let delta = current.as_ref().map(|p| &p.delta);
        Ok(greedy_decode(&self.weights, delta, prompt, max_new, stop_token)?)
    }
}

/// Server state: the pool, its fingerprint, the uncustomized server model, a
/// replica of the device base for threshold simulation, and the held-out
/// calibration prompts.
pub struct ServerContext<T> {
    pub pool: BaseAdapterPool<T>,
    pub pool_checksum: u64,
    pub server_weights: Arc<TransformerWeights<T>>,
    pub device_base: Arc<TransformerWeights<T>>,
    pub calibration_prompts: Vec<Vec<u32>>,
    pub target_ratio: f64,
    pub scorer: Scorer,
    pub decode_max_new: usize,
    pub stop_token: Option<u32>,
}

impl<T: Real> ServerContext<T> {
    /// Blends the customized adapter from the request (no optimization),
    /// builds prototypes from the provided customization prompts, calibrates
    /// the routing threshold on the held-out calibration slice, and packages
    /// everything for deployment.
    ///
    /// `proto_prompts` are the customization prompts used for prototype
    /// construction; they reach the server through this separate channel,
    /// never through the request message.
    pub fn serve_blend(
        &self,
        req: &CustomizationRequest,
        proto_prompts: &[Vec<u32>],
    ) -> Result<DeploymentPackage<T>, ProtocolError> {
        if req.protocol_version != PROTOCOL_VERSION {
            return Err(ProtocolError::Version {
                got: req.protocol_version,
                expected: PROTOCOL_VERSION,
            });
        }
        if req.n_bases != self.pool.n_bases || req.alphas.len() != self.pool.n_bases {
            return Err(ProtocolError::CountMismatch {
                request: req.n_bases,
                pool: self.pool.n_bases,
            });
        }
        let server_id = format!("{:016x}", self.pool_checksum);
        if req.client_id != server_id {
            return Err(ProtocolError::ChecksumMismatch {
                client: req.client_id.clone(),
                server: server_id,
            });
        }

        let weights = BlendWeights::new(
            req.alphas.iter().map(|&a| T::from_f64(a)).collect(),
            req.normalized,
        );
        let adapter = blend_customized(&self.pool, &weights)?;

        let prototypes =
            build_prototypes(&self.server_weights, proto_prompts, self.decode_max_new, self.stop_token)?;

        // Threshold calibration simulates the customized device on the
        // held-out slice, using the same scorer the device will run.
        let delta = adapter.to_delta_set(&self.device_base.config)?;
        let mut scores = Vec::with_capacity(self.calibration_prompts.len());
        for prompt in &self.calibration_prompts {
            let (sig, decoded) = output_signature(
                &self.device_base,
                Some(&delta),
                prompt,
                self.decode_max_new,
                self.stop_token,
                SignatureSource::Device,
            )?;
            let score = match self.scorer {
                Scorer::Prototype => crate::hybrid::routing_score(&sig, &prototypes)?,
                Scorer::MaxSoftmax => max_softmax_score(&decoded)?,
            };
            scores.push(score);
        }
        let threshold = calibrate_threshold(&scores, self.target_ratio)?.threshold;

        Ok(DeploymentPackage {
            adapter,
            prototypes,
            threshold,
            pool_checksum: self.pool_checksum,
            protocol_version: PROTOCOL_VERSION,
        })
    }
}

/// One round of the customization session over a byte stream: read a framed
/// request, blend, reply with a framed package.
pub fn serve_session<T: Real>(
    server: &ServerContext<T>,
    proto_prompts: &[Vec<u32>],
    stream: &mut (impl Read + Write),
) -> Result<(), ProtocolError> {
    let req_bytes = read_frame(stream)?;
    let req = CustomizationRequest::from_bytes(&req_bytes)?;
    let pkg = server.serve_blend(&req, proto_prompts)?;
    write_frame(stream, &pkg.to_bytes())?;
    Ok(())
}
