//! Training side memories on a stream of edits.

mod augment;
mod config;
mod loss;
mod stream;

pub use augment::augment_prefixes;
pub use config::{EditConfig, EditExample};
pub use loss::{
    edit_loss, margin_loss, masked_step, memo_loss, prepared_edit_loss, EditLoss, MarginTerms,
    PreparedEdit,
};
pub use stream::{run_stream, EditMode, EditRecord, Editor, MergeEvent, StreamOutcome};
