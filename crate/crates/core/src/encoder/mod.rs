//! Two-tower prompted transformer encoder.

mod checkpoint;
mod graph;
mod sequence;
mod state;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use graph::{classify, cosine, Bind, DropoutRequest, Embedding, Encoded, Graph, LayerAttentions};
pub use sequence::{targets_from_roles, Modality, TokenRole, TokenSequence};
pub use state::{EncoderConfig, EncoderState, ParamId, ParamStore};
