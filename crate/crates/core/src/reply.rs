//! Parsing of the `{"thoughts", "answer", "score"}` reply format.
//!
//! Parsing never fails: every outcome, including refusals and garbage, is
//! encoded in [`ReplyStatus`].

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::LabelVocabulary;

const REFUSAL_PHRASES: &[&str] = &[
    "i'm sorry",
    "i am sorry",
    "i apologize",
    "as an ai",
    "cannot assist",
    "can't assist",
    "cannot help",
    "can't help",
    "cannot provide",
    "can't provide",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplyStatus {
    Ok,
    InvalidJson,
    UnknownAnswer,
    Refusal,
    ScoreOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    pub thoughts: String,
    pub answer_raw: String,
    /// Canonical label key matched from `answer_raw`.
    pub label: Option<String>,
    pub score: Option<f64>,
    pub status: ReplyStatus,
}

impl ModelReply {
    fn failed(status: ReplyStatus) -> Self {
        ModelReply {
            thoughts: String::new(),
            answer_raw: String::new(),
            label: None,
            score: None,
            status,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ReplyStatus::Ok
    }

    /// Renders the reply in the template's field order.
    pub fn to_template_json(&self) -> String {
        #[derive(Serialize)]
        struct Template<'a> {
            thoughts: &'a str,
            answer: &'a str,
            score: Option<f64>,
        }
        serde_json::to_string(&Template {
            thoughts: &self.thoughts,
            answer: &self.answer_raw,
            score: self.score,
        })
        .expect("plain struct serializes")
    }
}

/// Builds a well-formed reply text, as a compliant model would send it.
pub fn format_reply(thoughts: &str, answer: &str, score: f64) -> String {
    ModelReply {
        thoughts: thoughts.to_string(),
        answer_raw: answer.to_string(),
        label: None,
        score: Some(score),
        status: ReplyStatus::Ok,
    }
    .to_template_json()
}

/// Lowercases, collapses whitespace and trims punctuation at both ends.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

pub fn match_answer(answer: &str, vocab: &LabelVocabulary) -> Option<String> {
    let norm = normalize_answer(answer);
    if norm.is_empty() {
        return None;
    }
    vocab
        .labels
        .iter()
        .find(|l| normalize_answer(&l.answer) == norm)
        .map(|l| l.key.clone())
}

/// Returns the body of the first markdown code fence, or the input.
fn strip_fences(text: &str) -> &str {
    let Some(start) = text.find("```") else {
        return text;
    };
    let after = &text[start + 3..];
    // Skip a language tag such as `json`.
    let body_start = after
        .find(|c: char| !c.is_ascii_alphanumeric())
        .unwrap_or(after.len());
    let body = &after[body_start..];
    match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    }
}

fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    for (pos, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn is_refusal(text: &str) -> bool {
    let lower = text.replace(['\u{2019}', '\u{2018}'], "'").to_lowercase();
    REFUSAL_PHRASES.iter().any(|p| lower.contains(p))
}

fn score_of(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|x| x.is_finite())
}

pub fn parse_reply(raw_text: &str, vocab: &LabelVocabulary) -> ModelReply {
    let body = strip_fences(raw_text);
    let object = first_json_object(body).or_else(|| first_json_object(raw_text));
    let Some(obj) = object else {
        return ModelReply::failed(if is_refusal(raw_text) {
            ReplyStatus::Refusal
        } else {
            ReplyStatus::InvalidJson
        });
    };

    let thoughts = match obj.get("thoughts") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
        None => String::new(),
    };
    let Some(Value::String(answer_raw)) = obj.get("answer") else {
        return ModelReply {
            thoughts,
            ..ModelReply::failed(ReplyStatus::InvalidJson)
        };
    };
    let label = match_answer(answer_raw, vocab);
    let score = obj.get("score").and_then(score_of);
    let status = match (&label, score) {
        (None, _) => ReplyStatus::UnknownAnswer,
        (Some(_), None) => ReplyStatus::InvalidJson,
        (Some(_), Some(s)) if !(0.0..=1.0).contains(&s) => ReplyStatus::ScoreOutOfRange,
        _ => ReplyStatus::Ok,
    };
    ModelReply {
        thoughts,
        answer_raw: answer_raw.clone(),
        label,
        score,
        status,
    }
}
