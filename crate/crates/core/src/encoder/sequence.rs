use serde::{Deserialize, Serialize};

use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    /// Vision `[CLS]`.
    GlobalCls,
    /// Text `[EOS]`, the pooled text position.
    GlobalEos,
    /// Text `[BOS]`.
    GlobalBos,
    Prompt,
    Content,
}

impl TokenRole {
    pub fn is_global(self) -> bool {
        matches!(self, TokenRole::GlobalCls | TokenRole::GlobalEos | TokenRole::GlobalBos)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenRole::GlobalCls => "cls",
            TokenRole::GlobalEos => "eos",
            TokenRole::GlobalBos => "bos",
            TokenRole::Prompt => "prompt",
            TokenRole::Content => "content",
        }
    }
}

/// A modality-tagged token sequence. `T` is a tape handle while building a
/// graph, or a plain [`Tensor`] for value-level operations.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T = Var> {
    pub modality: Modality,
    /// `L × D` token matrix.
    pub tokens: T,
    pub roles: Vec<TokenRole>,
    /// Dropout-eligible positions: every non-global token.
    pub target_indices: Vec<usize>,
}

impl<T> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn global_indices(&self) -> Vec<usize> {
        self.positions(TokenRole::is_global)
    }

    pub fn prompt_indices(&self) -> Vec<usize> {
        self.positions(|r| r == TokenRole::Prompt)
    }

    fn positions(&self, pred: impl Fn(TokenRole) -> bool) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(**r))
            .map(|(j, _)| j)
            .collect()
    }

    /// Position of the token whose final state is pooled into the embedding:
    /// `[CLS]` for vision, `[EOS]` for text.
    pub fn pool_index(&self) -> usize {
        let role = match self.modality {
            Modality::Vision => TokenRole::GlobalCls,
            Modality::Text => TokenRole::GlobalEos,
        };
        self.roles.iter().position(|r| *r == role).expect("sequence has its pooled token")
    }

    pub(crate) fn with_tokens<U>(&self, tokens: U) -> TokenSequence<U> {
        TokenSequence {
            modality: self.modality,
            tokens,
            roles: self.roles.clone(),
            target_indices: self.target_indices.clone(),
        }
    }
}

/// Targets derived from roles.
pub fn targets_from_roles(roles: &[TokenRole]) -> Vec<usize> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_global())
        .map(|(j, _)| j)
        .collect()
}

impl TokenSequence<Tensor> {
    pub fn token(&self, j: usize) -> &[f64] {
        self.tokens.row(j)
    }
}
