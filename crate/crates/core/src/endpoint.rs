//! Black-box generation interface.
//!
//! A user only sees what a provider returns for a prompt: image proxies and
//! their seeds. [`ImageEndpoint`] is that contract; [`LocalEndpoint`] serves it
//! in-process and the HTTP service serves the same [`handle_generate`] over
//! the wire, so both paths produce identical payloads.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::error::{BpoError, Result};
use crate::model_sim::{ModelRegistry, ModelSpec};

/// Upper bound on images per request.
pub const MAX_IMAGES_PER_REQUEST: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub origin_concept: String,
    pub n: usize,
    pub seed_base: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub proxy: Embedding,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub provider: String,
    pub claimed_model_id: String,
    pub images: Vec<GeneratedImage>,
}

impl GenerateResponse {
    /// Checks image count and unit norms against the request.
    pub fn validate(&self, req: &GenerateRequest) -> Result<()> {
        if self.images.len() != req.n {
            return Err(BpoError::Protocol(format!("asked for {} images, got {}", req.n, self.images.len())));
        }
        for (i, img) in self.images.iter().enumerate() {
            if !img.proxy.is_finite() || (img.proxy.norm() - 1.0).abs() > 1e-9 {
                return Err(BpoError::Protocol(format!("image {i} is not a unit vector")));
            }
        }
        Ok(())
    }
}

pub trait ImageEndpoint: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse>;
}

/// Who a provider says it runs and what it actually runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    pub claimed_model_id: String,
    pub actual_model_id: String,
}

impl ProviderConfig {
    pub fn honest(name: &str, model_id: &str) -> Self {
        ProviderConfig { name: name.into(), claimed_model_id: model_id.into(), actual_model_id: model_id.into() }
    }

    pub fn validate(&self, registry: &ModelRegistry) -> Result<()> {
        registry.model(&self.claimed_model_id)?;
        registry.model(&self.actual_model_id)?;
        Ok(())
    }
}

/// Serves one request with the provider's actual model. Error messages never
/// mention the actual model.
pub fn handle_generate(registry: &ModelRegistry, provider: &ProviderConfig, req: &GenerateRequest) -> Result<GenerateResponse> {
    if req.n == 0 || req.n > MAX_IMAGES_PER_REQUEST {
        return Err(BpoError::InvalidConfig(format!("n must be in 1..={MAX_IMAGES_PER_REQUEST}")));
    }
    let prompt = registry.tokenize(&req.prompt)?;
    let origin = registry.concept_id(&req.origin_concept)?;
    let model = registry.model(&provider.actual_model_id)?;
    let e = model.encode(&prompt)?;
    let images = (0..req.n as u64)
        .map(|i| {
            let seed = req.seed_base.wrapping_add(i);
            registry.generate(model, &e, origin, seed).map(|img| GeneratedImage { proxy: img.proxy, seed })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GenerateResponse {
        provider: provider.name.clone(),
        claimed_model_id: provider.claimed_model_id.clone(),
        images,
    })
}

/// In-process provider.
#[derive(Clone, Debug)]
pub struct LocalEndpoint {
    registry: Arc<ModelRegistry>,
    provider: ProviderConfig,
}

impl LocalEndpoint {
    pub fn new(registry: Arc<ModelRegistry>, provider: ProviderConfig) -> Result<Self> {
        provider.validate(&registry)?;
        Ok(LocalEndpoint { registry, provider })
    }

    /// Honest provider named after the model it serves.
    pub fn for_model(registry: Arc<ModelRegistry>, model_id: &str) -> Result<Self> {
        Self::new(registry, ProviderConfig::honest(model_id, model_id))
    }
}

impl ImageEndpoint for LocalEndpoint {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        handle_generate(&self.registry, &self.provider, req)
    }
}

/// Borrowing honest provider for one model, used by the owner and the
/// benchmark.
#[derive(Clone, Debug)]
pub struct ModelEndpoint<'a> {
    registry: &'a ModelRegistry,
    provider: ProviderConfig,
}

impl<'a> ModelEndpoint<'a> {
    pub fn new(registry: &'a ModelRegistry, model: &ModelSpec) -> Self {
        ModelEndpoint { registry, provider: ProviderConfig::honest(&model.id, &model.id) }
    }
}

impl ImageEndpoint for ModelEndpoint<'_> {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        handle_generate(self.registry, &self.provider, req)
    }
}
