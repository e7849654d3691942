use std::sync::LazyLock;

use regex::Regex;

use super::{LvmOutcome, LvmResponse};
use crate::model::{Decision, Verdict, VerdictSource};

static FINAL_ANSWER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)final\s+answer\s*:\s*\**\s*(keep|discard)\b").expect("valid regex")
});

// Checked first and blanked out, so "not a true positive" never reads as keep.
static DISCARD_TERMS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(false[\s-]+positive|not\s+a\s+(?:true\s+)?(?:nodule|positive|lesion)|no\s+nodule|discard(?:ed)?|likely\s+(?:a\s+)?(?:vessel|artifact)|should\s+be\s+removed)\b",
    )
    .expect("valid regex")
});

static KEEP_TERMS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(true[\s-]+positive|keep|is\s+a\s+(?:true\s+)?nodule|consistent\s+with\s+a\s+nodule|(?:likely|probably)\s+a\s+(?:true\s+)?nodule|matches\s+the\s+description)\b",
    )
    .expect("valid regex")
});

fn final_paragraph(text: &str) -> &str {
    text.split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .last()
        .unwrap_or("")
}

/// Keyword decision over the final paragraph; None when absent or
/// contradictory.
fn fallback(text: &str) -> Option<Decision> {
    let para = final_paragraph(text);
    let discard = DISCARD_TERMS.is_match(para);
    let rest = DISCARD_TERMS.replace_all(para, " ");
    let keep = KEEP_TERMS.is_match(&rest);
    match (keep, discard) {
        (true, false) => Some(Decision::Keep),
        (false, true) => Some(Decision::Discard),
        _ => None,
    }
}

/// Total: every response maps to exactly one of Keep, Discard, Reject.
pub fn parse_verdict(response: &LvmResponse, candidate_id: &str) -> Verdict {
    let (decision, rationale) = match &response.outcome {
        LvmOutcome::Refusal(s) => (Decision::Reject, format!("refusal: {s}")),
        LvmOutcome::TransportError(s) => (Decision::Reject, format!("transport error: {s}")),
        LvmOutcome::Text(text) => {
            let explicit = FINAL_ANSWER
                .captures_iter(text)
                .last()
                .map(|c| match c[1].to_ascii_lowercase().as_str() {
                    "keep" => Decision::Keep,
                    _ => Decision::Discard,
                });
            match explicit.or_else(|| fallback(text)) {
                Some(d) => (d, text.trim().to_string()),
                None => (Decision::Reject, "unparseable".to_string()),
            }
        }
    };
    Verdict {
        candidate_id: candidate_id.to_string(),
        decision,
        rationale,
        source: VerdictSource::Lvm,
    }
}
