//! Prompt rendering, response parsing, retries and edit selection.

pub mod edits;
pub mod grammar;
pub mod retry;
pub mod template;

pub use edits::{detect_edits, select_edits};
pub use grammar::{
    format_string_list, parse_alternatives, parse_caption, parse_keywords, parse_stage_response,
    parse_stage_response_bytes, ParseError, PromptStage, StageResponse,
};
pub use retry::{run_with_retry, Attempt, RetryError, RetryOutcome, RetryPolicy};
pub use template::{
    render_alternatives_prompt, render_counterfactual_prompt, render_keywords_prompt, PromptTemplate, TemplateError,
    TemplateSet, EXAMPLE_HEADER, FORMAT_HEADER, QUERY_HEADER,
};
