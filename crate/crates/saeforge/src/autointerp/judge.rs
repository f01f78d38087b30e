//! Judge backends for the autointerp pipeline.
//!
//! A judge sees formatted sequences only. [`DetectionItem::fires`] is carried
//! alongside so *oracle* mocks and the scorer can exist; an honest judge must
//! never read it.

use super::{format_highlighted, DetectionItem, LatentExampleSet};
use crate::error::{Result, SaeForgeError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

/// Explanation proposer + detection classifier.
pub trait Judge {
    /// Phase 1: produce a short natural-language explanation of the latent
    /// from its highlighted example sequences.
    fn propose(&self, latent: usize, examples: &LatentExampleSet) -> Result<String>;

    /// Phase 2: given only the explanation and the raw token sequences,
    /// return one firing prediction per item, in order.
    fn detect(&self, explanation: &str, items: &[DetectionItem]) -> Result<Vec<bool>>;
}

// ── Mocks ───────────────────────────────────────────────────────────────────

/// Upper-bound mock: reads the hidden flags. Pipeline plumbing is correct iff
/// this judge scores exactly 1.0.
pub struct OracleMockJudge;

impl Judge for OracleMockJudge {
    fn propose(&self, latent: usize, _examples: &LatentExampleSet) -> Result<String> {
        Ok(format!("oracle explanation for latent {latent}"))
    }

    fn detect(&self, _explanation: &str, items: &[DetectionItem]) -> Result<Vec<bool>> {
        Ok(items.iter().map(|i| i.fires).collect())
    }
}

/// Degenerate mock that claims every sequence fires. With the full 10/2/2
/// composition and 10 never-firing random items it scores 4/14.
pub struct AlwaysFiresJudge;

impl Judge for AlwaysFiresJudge {
    fn propose(&self, latent: usize, _examples: &LatentExampleSet) -> Result<String> {
        Ok(format!("latent {latent} fires on everything"))
    }

    fn detect(&self, _explanation: &str, items: &[DetectionItem]) -> Result<Vec<bool>> {
        Ok(vec![true; items.len()])
    }
}

/// Deterministic text-only mock. The explanation is the set of tokens that
/// co-occur most often with firing positions in the examples (argmax count,
/// all ties kept); detection predicts "fires" iff any explanation token
/// appears in the sequence. No activation data is read at detection time.
#[derive(Default)]
pub struct KeywordMockJudge;

impl Judge for KeywordMockJudge {
    fn propose(&self, _latent: usize, examples: &LatentExampleSet) -> Result<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in examples.top_sequences.iter().chain(&examples.sampled_sequences) {
            for (tok, &act) in ex.tokens.iter().zip(&ex.activations) {
                if act > 0.0 {
                    *counts.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
        let best = counts.values().copied().max().unwrap_or(0);
        if best == 0 {
            return Err(SaeForgeError::Judge {
                attempts: 1,
                message: "keyword mock saw no firing tokens in the examples".into(),
            });
        }
        // Keep only the argmax-count tokens so incidental co-occurrers (noise
        // or background tokens) cannot inflate detection to "always yes".
        let mut keywords: Vec<&str> =
            counts.iter().filter(|&(_, &c)| c == best).map(|(&t, _)| t).collect();
        keywords.sort_unstable();
        Ok(keywords.join(" "))
    }

    fn detect(&self, explanation: &str, items: &[DetectionItem]) -> Result<Vec<bool>> {
        let keywords: BTreeSet<&str> = explanation.split_whitespace().collect();
        Ok(items
            .iter()
            .map(|item| item.tokens.iter().any(|t| keywords.contains(t.as_str())))
            .collect())
    }
}

// ── Remote judge ────────────────────────────────────────────────────────────

/// Versioned prompt templates shipped with the crate.
const PROMPTS_JSON: &str = include_str!("../../assets/judge_prompts.json");

#[derive(Debug, Clone, Deserialize)]
struct PromptSet {
    version: u32,
    explain_system: String,
    explain_user: String,
    detect_system: String,
    detect_user: String,
}

fn load_prompts() -> Result<PromptSet> {
    let prompts: PromptSet =
        serde_json::from_str(PROMPTS_JSON).map_err(|e| SaeForgeError::Config {
            key_path: "assets/judge_prompts.json".into(),
            message: e.to_string(),
        })?;
    if prompts.version != 1 {
        return Err(SaeForgeError::Config {
            key_path: "assets/judge_prompts.json#version".into(),
            message: format!("this build understands version 1, found {}", prompts.version),
        });
    }
    Ok(prompts)
}

/// Connection settings for an OpenAI-compatible chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteJudgeConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer credential. The key itself is
    /// never written to config files or reports.
    pub api_key_env: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for RemoteJudgeConfig {
    fn default() -> Self {
        RemoteJudgeConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "SAEFORGE_JUDGE_API_KEY".into(),
            max_retries: 3,
            backoff_ms: 500,
            timeout_s: 60,
        }
    }
}

/// Chat-completion judge. Each call retries up to `max_retries` times with
/// exponential backoff before surfacing [`SaeForgeError::Judge`]; the caller
/// (the pipeline) then excludes that latent and keeps going.
pub struct RemoteJudge {
    config: RemoteJudgeConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    prompts: PromptSet,
}

impl RemoteJudge {
    pub fn new(config: RemoteJudgeConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| SaeForgeError::Judge {
            attempts: 0,
            message: format!(
                "remote judge needs a credential in ${} (variable unset or unreadable)",
                config.api_key_env
            ),
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| SaeForgeError::Judge {
                attempts: 0,
                message: format!("http client: {e}"),
            })?;
        let prompts = load_prompts()?;
        Ok(RemoteJudge { config, api_key, client, prompts })
    }

    /// One chat completion; returns the assistant message text.
    fn complete(&self, system: &str, user: &str) -> std::result::Result<String, String> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| format!("request: {e}"))?;
        let status = response.status();
        let payload: Value = response.json().map_err(|e| format!("body: {e}"))?;
        if !status.is_success() {
            return Err(format!("status {status}: {payload}"));
        }
        payload["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("malformed completion payload: {payload}"))
    }

    /// Retry wrapper: `op` maps the raw completion to a typed answer; both
    /// transport errors and parse failures consume an attempt.
    fn with_retries<T>(
        &self,
        system: &str,
        user: &str,
        mut op: impl FnMut(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.backoff_ms << (attempt - 1),
                ));
            }
            match self.complete(system, user).and_then(|text| op(&text)) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    eprintln!("remote judge attempt {}: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(SaeForgeError::Judge {
            attempts: self.config.max_retries,
            message: last,
        })
    }
}

fn render_examples(examples: &LatentExampleSet) -> Result<String> {
    let mut lines = Vec::new();
    for ex in examples.top_sequences.iter().chain(&examples.sampled_sequences) {
        lines.push(format_highlighted(&ex.tokens, &ex.activations)?);
    }
    Ok(lines.join("\n"))
}

impl Judge for RemoteJudge {
    fn propose(&self, latent: usize, examples: &LatentExampleSet) -> Result<String> {
        let user = self
            .prompts
            .explain_user
            .replace("{latent}", &latent.to_string())
            .replace("{examples}", &render_examples(examples)?);
        self.with_retries(&self.prompts.explain_system, &user, |text| {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                Err("empty explanation".into())
            } else {
                Ok(trimmed.to_string())
            }
        })
    }

    fn detect(&self, explanation: &str, items: &[DetectionItem]) -> Result<Vec<bool>> {
        let sequences = items
            .iter()
            .enumerate()
            .map(|(i, item)| format!("{}. {}", i + 1, item.tokens.join(" ")))
            .collect::<Vec<_>>()
            .join("\n");
        let user = self
            .prompts
            .detect_user
            .replace("{explanation}", explanation)
            .replace("{sequences}", &sequences)
            .replace("{count}", &items.len().to_string());
        let expected = items.len();
        self.with_retries(&self.prompts.detect_system, &user, |text| {
            let digits: Vec<bool> = text
                .chars()
                .filter_map(|c| match c {
                    '1' => Some(true),
                    '0' => Some(false),
                    _ => None,
                })
                .collect();
            if digits.len() == expected {
                Ok(digits)
            } else {
                Err(format!(
                    "expected {expected} verdict digits, parsed {}",
                    digits.len()
                ))
            }
        })
    }
}
