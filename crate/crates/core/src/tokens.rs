//! Reserved token ids shared by corpus, model and evaluation.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Marks spans to extract in the marked-extract task.
pub const MARKER: u32 = 3;
/// Smallest id available to content tokens.
pub const FIRST_CONTENT: u32 = 4;
