//! Prompt templates, stored verbatim as text assets under `assets/`.

/// Chain-of-thought task prompt; `{problem}` is the question slot.
pub const COT_TEMPLATE: &str = include_str!("../assets/cot_prompt.txt");

/// Conservative step-merging rewrite prompt sent to the external rewriter;
/// slots are `{question}` and `{original_resp}`.
pub const DENSE_REWRITE_TEMPLATE: &str = include_str!("../assets/dense_rewrite_prompt.txt");

/// Inference-time dense-style instruction block (no slots).
pub const DENSE_INFERENCE_TEMPLATE: &str = include_str!("../assets/dense_inference_prompt.txt");

/// A template's text without the asset file's trailing newline.
fn template(raw: &str) -> &str {
    raw.strip_suffix('\n').unwrap_or(raw)
}

/// Format the chain-of-thought prompt for one question.
pub fn cot_prompt(problem: &str) -> String {
    template(COT_TEMPLATE).replace("{problem}", problem)
}

/// Format the rewrite request for the external rewriter.
pub fn dense_rewrite_prompt(question: &str, original_response: &str) -> String {
    template(DENSE_REWRITE_TEMPLATE)
        .replace("{question}", question)
        .replace("{original_resp}", original_response)
}

/// Format the dense-style generation prompt: the instruction block followed
/// by the standard chain-of-thought prompt.
pub fn dense_inference_prompt(problem: &str) -> String {
    format!(
        "{}\n\n{}",
        template(DENSE_INFERENCE_TEMPLATE),
        cot_prompt(problem)
    )
}
