//! LLM-backed verifier speaking the chat-completions JSON protocol.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use url::Url;

use super::{Verdict, VerdictSource};
use crate::dataset::{Document, Query};
use crate::error::{Error, Result};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "\
You are checking retrieved passages for a question that has many correct answers.

Question: {question}

Passage: {document}

Does the passage mention at least one entity that correctly answers the question? \
Answer with a single word, Yes or No.";

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub endpoint: Url,
    pub model: String,
    /// Must contain `{question}` and `{document}`.
    pub prompt_template: String,
    pub timeout: Duration,
    pub max_parallel: usize,
    pub max_tokens: u32,
    pub api_key: Option<String>,
    pub retries: u32,
    pub backoff: Duration,
}

impl LlmConfig {
    pub fn new(endpoint: &str, model: impl Into<String>) -> Result<Self> {
        let endpoint = Url::parse(endpoint)
            .map_err(|e| Error::Config(format!("verifier endpoint {endpoint:?}: {e}")))?;
        Ok(Self {
            endpoint,
            model: model.into(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            timeout: Duration::from_secs(60),
            max_parallel: 8,
            max_tokens: 8,
            api_key: None,
            retries: 2,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.endpoint.scheme(), "http" | "https") {
            return Err(Error::Config(format!(
                "verifier endpoint must be http(s), got {}",
                self.endpoint
            )));
        }
        for placeholder in ["{question}", "{document}"] {
            if !self.prompt_template.contains(placeholder) {
                return Err(Error::Config(format!(
                    "prompt template is missing {placeholder}"
                )));
            }
        }
        if self.max_parallel == 0 {
            return Err(Error::Config("max_parallel must be at least 1".into()));
        }
        Ok(())
    }

    pub fn render_prompt(&self, query: &Query, doc: &Document) -> String {
        self.prompt_template
            .replace("{question}", &query.question)
            .replace("{document}", &doc.render())
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f32,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

enum Attempt {
    Retryable(String),
    Fatal(String),
}

#[derive(Debug, Clone)]
pub struct LlmVerifier {
    config: LlmConfig,
    client: reqwest::blocking::Client,
}

impl LlmVerifier {
    pub fn new(config: LlmConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn request_once(&self, prompt: &str) -> std::result::Result<String, Attempt> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
            max_tokens: self.config.max_tokens,
        };
        let mut req = self.client.post(self.config.endpoint.clone()).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| Attempt::Fatal(format!("malformed response body: {e}")))?;
        let first = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Fatal("response has no choices".into()))?;
        Ok(first.message.content.unwrap_or_default())
    }

    /// Sends one prompt, retrying transport failures with exponential backoff.
    fn complete(&self, prompt: &str, doc_id: &str) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.request_once(prompt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Retryable(msg)) if attempt < self.config.retries => {
                    log::warn!("verifier request for {doc_id} failed ({msg}); retrying");
                    std::thread::sleep(self.config.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(Attempt::Retryable(message)) | Err(Attempt::Fatal(message)) => {
                    return Err(Error::Verifier {
                        doc_id: doc_id.to_string(),
                        message,
                    })
                }
            }
        }
    }

    pub fn verify(&self, query: &Query, doc: &Document) -> Result<Verdict> {
        let reply = self.complete(&self.config.render_prompt(query, doc), &doc.id)?;
        Ok(Verdict {
            doc_id: doc.id.clone(),
            relevant: parse_reply(&reply).unwrap_or(false),
            source: VerdictSource::Llm,
            raw_response: Some(reply),
        })
    }

    /// Verifies up to `max_parallel` documents at a time; verdicts come back
    /// in input order whatever the completion order.
    pub fn verify_many(&self, query: &Query, docs: &[&Document]) -> Result<Vec<Verdict>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Verdict>>>> =
            docs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_parallel.min(docs.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= docs.len() {
                        break;
                    }
                    let verdict = self.verify(query, docs[i]);
                    *slots[i].lock().unwrap() = Some(verdict);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
            .collect()
    }
}

/// Reads the leading yes/no token of a reply. `None` when neither is found.
pub fn parse_reply(reply: &str) -> Option<bool> {
    let mut text = reply.trim_start();
    if let Some(rest) = text.strip_prefix("<think>") {
        let end = rest.find("</think>")?;
        text = rest[end + "</think>".len()..].trim_start();
    }
    let word: String = text
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}
