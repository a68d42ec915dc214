use serde::{Deserialize, Serialize};

use super::{count_tokens, tokenize, GatewayError, ModelRequest, ModelResponse, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub increment: String,
    pub request: ModelRequest,
    pub response: ModelResponse,
}

/// Single-owner state of an incremental exchange with one backend.
///
/// `reserved_tokens` is the budget held back for the preamble; the rest of
/// the window is shared between the current increment and as much recent
/// history as fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSession {
    pub session_id: String,
    pub actor_id: String,
    pub purpose: Purpose,
    pub preamble: String,
    pub history: Vec<SessionTurn>,
    pub window_tokens: usize,
    pub reserved_tokens: usize,
    pub query_count: usize,
    pub max_completion_tokens: usize,
    /// Seed for the next query; callers may change it between increments.
    pub seed: u64,
}

impl ModelSession {
    pub fn new(
        session_id: impl Into<String>,
        actor_id: impl Into<String>,
        window_tokens: usize,
        reserved_tokens: usize,
    ) -> Result<Self, GatewayError> {
        if reserved_tokens >= window_tokens {
            return Err(GatewayError::InvalidWindow {
                window: window_tokens,
                reserved: reserved_tokens,
            });
        }
        Ok(Self {
            session_id: session_id.into(),
            actor_id: actor_id.into(),
            purpose: Purpose::Other,
            preamble: String::new(),
            history: Vec::new(),
            window_tokens,
            reserved_tokens,
            query_count: 0,
            max_completion_tokens: super::DEFAULT_MAX_COMPLETION_TOKENS,
            seed: 0,
        })
    }

    pub fn with_preamble(mut self, preamble: impl Into<String>) -> Self {
        self.preamble = preamble.into();
        self
    }

    pub fn with_purpose(mut self, purpose: Purpose) -> Self {
        self.purpose = purpose;
        self
    }

    /// Largest increment the session accepts.
    pub fn increment_capacity(&self) -> usize {
        self.window_tokens - self.reserved_tokens
    }

    fn render_turn(turn: &SessionTurn) -> String {
        format!("> {}\n{}", turn.increment, turn.response.text)
    }

    /// Builds the request for `increment`; the flag reports dropped history.
    pub(crate) fn assemble(&self, increment: &str) -> Result<(ModelRequest, bool), GatewayError> {
        let inc_tokens = count_tokens(increment);
        if inc_tokens == 0 {
            return Err(GatewayError::InvalidRequest("empty increment".into()));
        }
        if inc_tokens > self.increment_capacity() {
            return Err(GatewayError::WindowExceeded {
                tokens: inc_tokens + self.reserved_tokens,
                window: self.window_tokens,
            });
        }

        let preamble = if count_tokens(&self.preamble) > self.reserved_tokens {
            tokenize(&self.preamble)[..self.reserved_tokens].join(" ")
        } else {
            self.preamble.clone()
        };

        let mut room = self.increment_capacity() - inc_tokens;
        let mut kept: Vec<String> = Vec::new();
        let mut dropped = false;
        for turn in self.history.iter().rev() {
            let rendered = Self::render_turn(turn);
            let cost = count_tokens(&rendered);
            if !dropped && cost <= room {
                room -= cost;
                kept.push(rendered);
            } else {
                dropped = true;
            }
        }
        kept.reverse();

        let mut parts = Vec::with_capacity(kept.len() + 2);
        if !preamble.trim().is_empty() {
            parts.push(preamble);
        }
        parts.extend(kept);
        parts.push(increment.to_string());

        let request = ModelRequest {
            prompt_text: parts.join("\n"),
            max_completion_tokens: self.max_completion_tokens,
            seed: self.seed,
            actor_id: self.actor_id.clone(),
            purpose: self.purpose,
        };
        Ok((request, dropped))
    }

    pub(crate) fn record(&mut self, increment: &str, request: ModelRequest, response: ModelResponse) {
        self.history.push(SessionTurn {
            increment: increment.to_string(),
            request,
            response,
        });
        self.query_count += 1;
    }
}

/// Splits `text` into chunks that each fit next to the reserved budget.
///
/// Chunks are token-joined by single spaces; concatenating their tokens
/// reproduces the token sequence of the input.
pub fn split_context(
    text: &str,
    window_tokens: usize,
    reserved_tokens: usize,
) -> Result<Vec<String>, GatewayError> {
    if reserved_tokens >= window_tokens {
        return Err(GatewayError::InvalidWindow {
            window: window_tokens,
            reserved: reserved_tokens,
        });
    }
    let capacity = window_tokens - reserved_tokens;
    Ok(tokenize(text)
        .chunks(capacity)
        .map(|chunk| chunk.join(" "))
        .collect())
}
