//! Pseudo reference passages: retrieval on a response concatenated with its
//! model-refined counterpart.

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueContext, TurnKey};
use crate::error::{Error, Result};
use crate::lm_client::{CompletionRequest, GenerationParams, LmClient};
use crate::retriever::{RankedRetrieval, Retriever, ScoredPassage, DEFAULT_TOP_N};

pub const DEFAULT_K_PSEUDO: usize = 3;

const TEMPLATE_PREFIX: &str = "Can you clearly state the main points of the last response (";
const TEMPLATE_SUFFIX: &str = "), contextualizing them and resolving coreferences?";

/// Layout of the refinement prompt, recorded in run manifests.
pub const REFINEMENT_PROMPT_LAYOUT: &str =
    "Q: <query>\\nA: <response>\\n... Q: <current query>\\nQ: <templated response>";

/// Turns a response into a query the reformulation model can rewrite.
pub fn form_refinement_query(response: &str) -> Result<String> {
    if response.is_empty() {
        return Err(Error::Input("response must be non-empty".into()));
    }
    Ok(format!("{TEMPLATE_PREFIX}{response}{TEMPLATE_SUFFIX}"))
}

/// Prompt sent to the reformulation model: serialized context, then the templated response.
pub fn refinement_prompt(context: &DialogueContext, response: &str) -> Result<String> {
    let templated = form_refinement_query(response)?;
    Ok(format!("{}\nQ: {templated}", context.serialize()))
}

/// Refines a response with the reformulation model.
///
/// Without a trained model (`model_ref` is `None`) no refinement happens and
/// the empty string is returned.
pub fn refine_response(
    context: &DialogueContext,
    response: &str,
    model_ref: Option<&str>,
    client: &LmClient,
    params: GenerationParams,
) -> Result<String> {
    let Some(model_ref) = model_ref else {
        return Ok(String::new());
    };
    let prompt = refinement_prompt(context, response)?;
    let text = client.complete(&CompletionRequest {
        model_ref: model_ref.to_string(),
        prompt,
        params,
    })?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Refinement(
            "model returned an empty refinement".into(),
        ));
    }
    Ok(text.to_string())
}

/// Like [`refine_response`] but degrades to the empty string, returning the
/// failure as a warning.
pub fn refine_or_empty(
    context: &DialogueContext,
    response: &str,
    model_ref: Option<&str>,
    client: &LmClient,
    params: GenerationParams,
) -> (String, Option<String>) {
    match refine_response(context, response, model_ref, client, params) {
        Ok(text) => (text, None),
        Err(e) => (String::new(), Some(e.to_string())),
    }
}

/// Response and refinement joined with a single space; the bare response when
/// the refinement is empty.
pub fn concat_source(response: &str, refined: &str) -> String {
    if refined.is_empty() {
        response.to_string()
    } else {
        format!("{response} {refined}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoReferenceSet {
    pub ref_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub source_query: String,
}

impl PseudoReferenceSet {
    pub fn is_empty(&self) -> bool {
        self.ref_ids.is_empty()
    }

    pub fn as_ranking(&self) -> RankedRetrieval {
        RankedRetrieval {
            entries: self
                .ref_ids
                .iter()
                .zip(&self.scores)
                .map(|(id, &score)| ScoredPassage {
                    id: id.clone(),
                    score,
                })
                .collect(),
            query: self.source_query.clone(),
        }
    }
}

pub fn generate_pseudo_refs(
    response: &str,
    refined: &str,
    retriever: &dyn Retriever,
    k_pseudo: usize,
) -> Result<PseudoReferenceSet> {
    if response.is_empty() {
        return Err(Error::Input("response must be non-empty".into()));
    }
    if k_pseudo == 0 {
        return Err(Error::Parameter("k_pseudo must be at least 1".into()));
    }
    let source_query = concat_source(response, refined);
    let mut ranked = retriever.retrieve(&source_query, k_pseudo.max(DEFAULT_TOP_N))?;
    ranked.truncate(k_pseudo);
    Ok(PseudoReferenceSet {
        ref_ids: ranked.entries.iter().map(|e| e.id.clone()).collect(),
        scores: ranked.entries.iter().map(|e| e.score).collect(),
        source_query,
    })
}

/// One line of the per-iteration pseudo reference dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRefRecord {
    #[serde(flatten)]
    pub key: TurnKey,
    pub iteration: usize,
    pub ref_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub source_query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl PseudoRefRecord {
    pub fn new(
        key: TurnKey,
        iteration: usize,
        set: PseudoReferenceSet,
        warning: Option<String>,
    ) -> Self {
        Self {
            key,
            iteration,
            ref_ids: set.ref_ids,
            scores: set.scores,
            source_query: set.source_query,
            warning,
        }
    }

    pub fn set(&self) -> PseudoReferenceSet {
        PseudoReferenceSet {
            ref_ids: self.ref_ids.clone(),
            scores: self.scores.clone(),
            source_query: self.source_query.clone(),
        }
    }
}
