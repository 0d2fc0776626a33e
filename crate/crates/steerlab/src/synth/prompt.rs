//! Fixed-length discrete prompts over a 16-token vocabulary.
//!
//! A prompt is `[context, site, concept, pad]`. Contrastive pairs differ in
//! exactly one position: the concept slot. Context tokens carry no image
//! semantics; varying them across seeds marginalizes incidental texture out
//! of the estimated direction.

use serde::{Deserialize, Serialize};
use steerlab_nn::{ops, Tensor};

use crate::error::{LabError, Result};
use crate::synth::SceneClass;

pub const VOCAB_SIZE: usize = 16;
pub const PROMPT_LEN: usize = 4;
/// Position of the concept token; the only slot a contrastive pair changes.
pub const CONCEPT_SLOT: usize = 2;

pub const CTX_TOKENS: [usize; 3] = [0, 1, 2];
pub const TOKEN_PAD: usize = 3;
pub const TOKEN_SITE_BASE: usize = 4;
pub const TOKEN_SITE_ALT: usize = 5;
pub const TOKEN_CONCEPT_NORMAL: usize = 6;
pub const TOKEN_CONCEPT_LESION: usize = 7;
pub const TOKEN_CONCEPT_DYED: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub tokens: [usize; PROMPT_LEN],
}

impl PromptSpec {
    pub fn new(tokens: [usize; PROMPT_LEN]) -> Result<Self> {
        for &t in &tokens {
            if t >= VOCAB_SIZE {
                return Err(LabError::Invalid(format!("token id {t} out of vocabulary")));
            }
        }
        Ok(Self { tokens })
    }

    /// The training prompt for a scene class, with a chosen context token.
    pub fn for_class(class: SceneClass, ctx: usize) -> Self {
        let site = if class == SceneClass::AltBackground { TOKEN_SITE_ALT } else { TOKEN_SITE_BASE };
        let concept = match class {
            SceneClass::Lesion => TOKEN_CONCEPT_LESION,
            SceneClass::DyedLesion => TOKEN_CONCEPT_DYED,
            SceneClass::Plain | SceneClass::AltBackground => TOKEN_CONCEPT_NORMAL,
        };
        Self { tokens: [CTX_TOKENS[ctx % CTX_TOKENS.len()], site, concept, TOKEN_PAD] }
    }

    /// Copy of this prompt with the concept slot replaced.
    pub fn with_concept(&self, concept: usize) -> Result<Self> {
        let mut tokens = self.tokens;
        tokens[CONCEPT_SLOT] = concept;
        Self::new(tokens)
    }

    /// Compact id used in manifests and trace keys, e.g. `"0-4-7-3"`.
    pub fn id(&self) -> String {
        self.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
    }
}

/// Contrastive prompt pair for a named steerable concept: the positive
/// prompt carries the concept, the negative differs only in the concept slot.
pub fn contrastive_pair(concept: &str, ctx: usize) -> Result<(PromptSpec, PromptSpec)> {
    let (pos_tok, neg_tok) = match concept {
        "lesion" => (TOKEN_CONCEPT_LESION, TOKEN_CONCEPT_NORMAL),
        "dye" => (TOKEN_CONCEPT_DYED, TOKEN_CONCEPT_LESION),
        other => {
            return Err(LabError::Invalid(format!(
                "unknown concept `{other}` (expected `lesion` or `dye`)"
            )))
        }
    };
    let base = PromptSpec::for_class(SceneClass::Plain, ctx);
    Ok((base.with_concept(pos_tok)?, base.with_concept(neg_tok)?))
}

/// Row lookup into a `[16, d_text]` embedding table -> `[4, d_text]`.
///
/// No position mixing happens here; cross-attention supplies all mixing.
pub fn encode_prompt(spec: &PromptSpec, table: &Tensor) -> Result<Tensor> {
    let (v, _) = table.dims2()?;
    if v != VOCAB_SIZE {
        return Err(LabError::Invalid(format!("embedding table has {v} rows, expected {VOCAB_SIZE}")));
    }
    Ok(ops::gather_rows(table, &spec.tokens)?)
}
