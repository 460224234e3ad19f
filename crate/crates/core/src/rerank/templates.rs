//! Prompt templates, byte-exact.
//!
//! Rendering rules:
//! - `{text}` is replaced by the sanitized node text (whitespace runs
//!   collapsed to one space, trimmed; empty becomes [`EMPTY_TEXT`]).
//! - Blocks are joined by [`BLOCK_SEPARATOR`] (two newlines); the shared
//!   prefix always ends with a separator in link-prediction mode.
//! - An in-context example block is the candidate block followed by one
//!   space and `Yes` or `No`.
//! - The candidate block ends at `Answer:` with no trailing space.
//! - The neighbor question keeps the trailing space after `?` before the
//!   separator.

pub const NODE_MARKER: &str = "<NODE>";
pub const PAIRWISE_MARKER: &str = "<PAIRWISE>";
pub const TEXT_SLOT: &str = "{text}";

pub const SOURCE_BLOCK: &str = "This is the source node. <NODE> Text: {text}.";
pub const CANDIDATE_BLOCK: &str =
    "This is another node. <NODE> <PAIRWISE> Text: {text}. Is this node connected with the source node? Answer:";
pub const NEIGHBOR_QUESTION: &str = " What nodes are connected with it? \n\nAnswer:";

pub const BLOCK_SEPARATOR: &str = "\n\n";
pub const ANSWER_YES: &str = "Yes";
pub const ANSWER_NO: &str = "No";
pub const EMPTY_TEXT: &str = "(no text)";
