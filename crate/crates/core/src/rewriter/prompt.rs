use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;

use super::RewriteError;
use crate::corpus::{LabelSet, LabeledDocument, Schema};

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

/// Generation and verification prompts.
///
/// Generation placeholders: `{label_name}`, `{context}`, `{text}`, `{n}`.
/// Verification placeholders: `{context}`, `{candidate}`, `{label_names}`.
/// Any line mentioning `{context}` is dropped for documents without context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub verify_instruction: String,
}

impl PromptTemplate {
    pub fn for_schema(schema: Schema) -> Self {
        match schema {
            Schema::Single => Self {
                instruction: "Rewrite the text below so that it keeps the label \"{label_name}\". \
Change the wording and sentence structure but keep everything that determines the label.\n\
Text: {text}\n\
Return {n} different rewrites, one per line, without numbering or commentary."
                    .into(),
                verify_instruction: "Text: {candidate}\n\
Which label fits the text? Answer with exactly one of: {label_names}."
                    .into(),
            },
            Schema::ClaimEvidence => Self {
                instruction: "Evidence: {context}\n\
Claim: {text}\n\
The relation between the evidence and the claim is \"{label_name}\". \
Write new claims based on the same evidence so that the relation stays \"{label_name}\". \
Change the wording and sentence structure of the claim.\n\
Return {n} different claims, one per line, without numbering or commentary."
                    .into(),
                verify_instruction: "Evidence: {context}\n\
Claim: {candidate}\n\
How does the evidence relate to the claim? Answer with exactly one of: {label_names}."
                    .into(),
            },
            Schema::PremiseHypothesis => Self {
                instruction: "Premise: {context}\n\
Hypothesis: {text}\n\
The relation between the premise and the hypothesis is \"{label_name}\". \
Write new hypotheses for the same premise so that the relation stays \"{label_name}\". \
Change the wording and sentence structure of the hypothesis.\n\
Return {n} different hypotheses, one per line, without numbering or commentary."
                    .into(),
                verify_instruction: "Premise: {context}\n\
Hypothesis: {candidate}\n\
What is the relation between the premise and the hypothesis? Answer with exactly one of: {label_names}."
                    .into(),
            },
        }
    }
}

fn render(template: &str, bindings: &BTreeMap<&str, String>, has_context: bool) -> Result<String, RewriteError> {
    let kept: Vec<&str> = template
        .lines()
        .filter(|line| has_context || !line.contains("{context}"))
        .collect();
    let text = kept.join("\n");
    let mut missing = None;
    let rendered = PLACEHOLDER.replace_all(&text, |caps: &regex::Captures<'_>| match bindings.get(&caps[1]) {
        Some(value) => value.clone(),
        None => {
            missing.get_or_insert_with(|| caps[1].to_string());
            String::new()
        }
    });
    if let Some(name) = missing {
        return Err(RewriteError::UnboundPlaceholder(name));
    }
    let rendered = rendered.trim().to_string();
    if rendered.is_empty() {
        return Err(RewriteError::EmptyPrompt);
    }
    Ok(rendered)
}

fn label_name<'a>(doc: &LabeledDocument, labels: &'a LabelSet) -> Result<&'a str, RewriteError> {
    labels
        .name(doc.label())
        .ok_or(RewriteError::MissingLabelName(doc.label()))
}

/// Renders the generation prompt for `doc`, asking for `n` rewrites.
pub fn build_prompt(
    doc: &LabeledDocument,
    template: &PromptTemplate,
    labels: &LabelSet,
    n: usize,
) -> Result<String, RewriteError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("label_name", label_name(doc, labels)?.to_string());
    bindings.insert("text", doc.mutable_text().to_string());
    bindings.insert("n", n.to_string());
    if let Some(context) = doc.context_text() {
        bindings.insert("context", context.to_string());
    }
    render(&template.instruction, &bindings, doc.context_text().is_some())
}

/// Renders the verification prompt for a candidate rewrite of `doc`.
pub fn build_verify_prompt(
    doc: &LabeledDocument,
    candidate: &str,
    template: &PromptTemplate,
    labels: &LabelSet,
) -> Result<String, RewriteError> {
    label_name(doc, labels)?;
    let mut bindings = BTreeMap::new();
    bindings.insert("candidate", candidate.to_string());
    let names: Vec<&str> = labels.iter().map(|(_, n)| n).collect();
    bindings.insert("label_names", names.join(", "));
    if let Some(context) = doc.context_text() {
        bindings.insert("context", context.to_string());
    }
    render(&template.verify_instruction, &bindings, doc.context_text().is_some())
}
