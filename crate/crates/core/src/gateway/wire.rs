//! OpenAI-compatible chat-completions wire shapes.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Alternative, CompletionRequest, CompletionResponse, Message, TokenLogprobs, Usage};

pub(crate) fn request_body(req: &CompletionRequest) -> Value {
    let mut body = json!({
        "model": req.model,
        "messages": req.messages,
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    });
    let obj = body.as_object_mut().expect("object literal");
    if req.top_logprobs > 0 {
        obj.insert("logprobs".into(), Value::Bool(true));
        obj.insert("top_logprobs".into(), json!(req.top_logprobs));
    }
    for (k, v) in &req.extra {
        obj.entry(k.clone()).or_insert_with(|| v.clone());
    }
    body
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub logprobs: Option<bool>,
    #[serde(default)]
    pub top_logprobs: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub object: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    pub choices: Vec<WireChoice>,
    #[serde(default)]
    pub usage: Option<WireUsage>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireChoice {
    #[serde(default)]
    pub index: u32,
    pub message: WireMessage,
    #[serde(default)]
    pub logprobs: Option<WireLogprobs>,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireLogprobs {
    #[serde(default)]
    pub content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireTokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<WireTopLogprob>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireTopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct WireUsage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

const LOGPROB_SLACK: f64 = 1e-6;

fn checked_logprob(lp: f64) -> Result<f64, String> {
    if lp.is_nan() || lp > LOGPROB_SLACK {
        Err(format!("logprob {lp} is not a log-probability"))
    } else {
        Ok(lp.min(0.0))
    }
}

pub(crate) fn parse_response(
    text: &str,
    logprobs_requested: bool,
) -> Result<CompletionResponse, String> {
    let wire: WireResponse =
        serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or("response has no choices")?;
    let content = choice.message.content.unwrap_or_default();
    let token_logprobs = match (logprobs_requested, choice.logprobs.and_then(|l| l.content)) {
        (true, Some(tokens)) => {
            let mut out = Vec::with_capacity(tokens.len());
            for t in tokens {
                let mut alternatives = Vec::with_capacity(t.top_logprobs.len());
                for a in t.top_logprobs {
                    alternatives.push(Alternative {
                        token: a.token,
                        logprob: checked_logprob(a.logprob)?,
                    });
                }
                out.push(TokenLogprobs::new(
                    t.token,
                    checked_logprob(t.logprob)?,
                    alternatives,
                ));
            }
            Some(out)
        }
        _ => None,
    };
    let usage = wire.usage.unwrap_or_default();
    Ok(CompletionResponse {
        text: content,
        token_logprobs,
        usage: Usage {
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        },
        provider_latency: Duration::ZERO,
        attempts: 1,
    })
}

/// Build a wire response, used by the mock server.
pub(crate) fn response_body(
    model: &str,
    content: &str,
    logprobs: Option<&[TokenLogprobs]>,
    prompt_tokens: u64,
) -> Value {
    let logprobs = logprobs.map(|tokens| {
        json!({
            "content": tokens.iter().map(|t| json!({
                "token": t.token,
                "logprob": t.logprob,
                "top_logprobs": t.top_alternatives.iter().map(|a| json!({"token": a.token, "logprob": a.logprob})).collect::<Vec<_>>(),
            })).collect::<Vec<_>>()
        })
    });
    let completion_tokens = logprobs
        .as_ref()
        .and_then(|l| l["content"].as_array().map(|a| a.len() as u64))
        .unwrap_or_else(|| content.split_whitespace().count() as u64);
    json!({
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "created": 0,
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "logprobs": logprobs,
            "finish_reason": "stop",
        }],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": prompt_tokens + completion_tokens,
        }
    })
}
