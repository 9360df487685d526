//! JSON bodies of the backend protocol. Field order is part of the contract:
//! serializing these structs with `serde_json` yields the exact bytes sent.
//!
//! ```text
//! POST /v1/generate {"prompt","role","model_id","max_tokens","temperature","num_samples","seed"}
//!                -> {"completions":[..],"deterministic":bool}
//! POST /v1/finetune {"examples":[{"input","target"}],"mode","lr","steps","batch"} -> {"model_id"}
//! POST /v1/label    {"prompt","model_id"} -> {"label"}
//! GET  /v1/health   -> {"ok":true}
//! ```

use serde::{Deserialize, Serialize};

/// Which soft-prompt set the backend should apply: one for generating input
/// features, one for generating output labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationRole {
    InputGeneration,
    OutputGeneration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub role: GenerationRole,
    pub model_id: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub num_samples: u32,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub completions: Vec<String>,
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// All model parameters are updated.
    Full,
    /// Only the soft-prompt vectors are updated.
    PromptOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRequest {
    pub examples: Vec<FinetuneExample>,
    pub mode: FinetuneMode,
    pub lr: f64,
    pub steps: u32,
    pub batch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneResponse {
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub prompt: String,
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub ok: bool,
}

/// Fine-tuning hyperparameters forwarded to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHyper {
    pub mode: FinetuneMode,
    pub lr: f64,
    pub steps: u32,
    pub batch: u32,
}

impl FinetuneHyper {
    /// Full fine-tuning: batch 12, learning rate 5e-6, 500 steps.
    pub const FULL: FinetuneHyper = FinetuneHyper {
        mode: FinetuneMode::Full,
        lr: 5e-6,
        steps: 500,
        batch: 12,
    };

    /// Soft-prompt-only tuning used for entity labeling, learning rate 1e-3.
    pub const PROMPT_ONLY: FinetuneHyper = FinetuneHyper {
        mode: FinetuneMode::PromptOnly,
        lr: 1e-3,
        steps: 500,
        batch: 12,
    };

    pub fn request(&self, examples: Vec<FinetuneExample>) -> FinetuneRequest {
        FinetuneRequest {
            examples,
            mode: self.mode,
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
        }
    }
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        Self::FULL
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_request_bytes() {
        let req = GenerateRequest {
            prompt: "[Text] <MASK_0>".into(),
            role: GenerationRole::InputGeneration,
            model_id: None,
            max_tokens: 256,
            temperature: 1.0,
            num_samples: 1,
            seed: Some(42),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"prompt":"[Text] <MASK_0>","role":"input_generation","model_id":null,"max_tokens":256,"temperature":1.0,"num_samples":1,"seed":42}"#
        );
    }

    #[test]
    fn finetune_and_label_bytes() {
        let req = FinetuneHyper::PROMPT_ONLY.request(vec![FinetuneExample {
            input: "[Output Tags] <MASK_0> [Sentence] x".into(),
            target: "<MASK_0> Person x. <END>".into(),
        }]);
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"examples":[{"input":"[Output Tags] <MASK_0> [Sentence] x","target":"<MASK_0> Person x. <END>"}],"mode":"prompt_only","lr":0.001,"steps":500,"batch":12}"#
        );
        let full = FinetuneHyper::FULL.request(vec![]);
        assert_eq!(
            serde_json::to_string(&full).unwrap(),
            r#"{"examples":[],"mode":"full","lr":5e-6,"steps":500,"batch":12}"#
        );
        let label = LabelRequest {
            prompt: "p".into(),
            model_id: Some("m1".into()),
        };
        assert_eq!(
            serde_json::to_string(&label).unwrap(),
            r#"{"prompt":"p","model_id":"m1"}"#
        );
        let health: HealthResponse = serde_json::from_str(r#"{"ok":true}"#).unwrap();
        assert!(health.ok);
    }
}
