//! Chat-completions request bodies and their canonical hash.

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::GatewayConfig;
use crate::prompt::{Part, PromptBundle};

/// The JSON body POSTed to `{endpoint}/chat/completions`.
pub fn build_request(bundle: &PromptBundle, config: &GatewayConfig) -> Value {
    let content: Vec<Value> = bundle
        .parts
        .iter()
        .map(|part| match part {
            Part::Text { text } => json!({"type": "text", "text": text}),
            Part::Image { payload, .. } => {
                let mut image_url = Map::new();
                image_url.insert("url".into(), Value::String(payload.data_url.clone()));
                if let Some(detail) = &config.image_detail {
                    image_url.insert("detail".into(), Value::String(detail.clone()));
                }
                json!({"type": "image_url", "image_url": image_url})
            }
        })
        .collect();
    json!({
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": content},
        ],
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rebuilds `v` with object keys in sorted order at every level.
pub fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), sorted(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
        other => other.clone(),
    }
}

fn digest_image_urls(v: &mut Value) {
    match v {
        Value::Object(map) => {
            if let Some(Value::Object(image)) = map.get_mut("image_url") {
                if let Some(Value::String(url)) = image.get_mut("url") {
                    *url = format!("sha256:{}", sha256_hex(url.as_bytes()));
                }
            }
            map.values_mut().for_each(digest_image_urls);
        }
        Value::Array(items) => items.iter_mut().for_each(digest_image_urls),
        _ => {}
    }
}

/// Canonical form of a request: keys sorted, image payloads replaced by
/// their SHA-256, and the re-query index recorded when non-zero.
pub fn canonical_request(request: &Value, requery: u32) -> Value {
    let mut v = request.clone();
    digest_image_urls(&mut v);
    if requery > 0 {
        if let Value::Object(map) = &mut v {
            map.insert("requery".into(), Value::from(requery));
        }
    }
    sorted(&v)
}

pub fn canonical_string(canonical: &Value) -> String {
    // Keys were inserted in sorted order; serialization preserves that
    // whether or not serde_json keeps insertion order.
    serde_json::to_string(canonical).expect("json values serialize")
}

pub fn request_hash(canonical: &Value) -> String {
    sha256_hex(canonical_string(canonical).as_bytes())
}

/// Extracts `choices[0].message.content`. Array-valued content is joined
/// from its text parts.
pub fn reply_text(body: &Value) -> Option<String> {
    match body.pointer("/choices/0/message/content")? {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}
