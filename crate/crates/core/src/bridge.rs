//! Client side of the model bridge protocol.
//!
//! The bridge is a separate service exposing real language models, a
//! toxicity classifier and a sentence embedder. It speaks newline-delimited
//! JSON over TCP: every request is one JSON object on one line and receives
//! exactly one JSON object on one line in reply. Requests carry an `op` tag,
//! replies a `type` tag.
//!
//! ```text
//! → {"op":"handshake","protocol_version":1}
//! ← {"type":"handshake","protocol_version":1,"vocab_size":151936,"tokenizer_id":"qwen2.5","embed_dim":1024,"eos_token_id":151643}
//! → {"op":"logits","context_token_ids":[1,2,3],"model_role":"base","temperature_hint":0.7}
//! ← {"type":"logits","logits":[...]}
//! → {"op":"toxicity","text":"..."}
//! ← {"type":"score","score":0.02,"dimensions":{"insult":0.01}}
//! ← {"type":"error","code":"bad_request","message":"..."}
//! ```
//!
//! A connection carries one request at a time. [`BridgeClient`] keeps a small
//! pool so concurrent callers each lease their own connection.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::providers::{DistributionProvider, ProviderError};
use crate::ranking::{RankingError, TextEmbedder, ToxicityScorer};
use crate::TokenId;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Base,
    Toxic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BridgeRequest {
    Handshake {
        protocol_version: u32,
    },
    Tokenize {
        text: String,
    },
    Detokenize {
        tokens: Vec<TokenId>,
    },
    Logits {
        context_token_ids: Vec<TokenId>,
        model_role: ModelRole,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        temperature_hint: Option<f64>,
    },
    Toxicity {
        text: String,
    },
    Embed {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: u32,
    pub vocab_size: usize,
    pub tokenizer_id: String,
    pub embed_dim: usize,
    #[serde(default)]
    pub eos_token_id: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BridgeResponse {
    Handshake(Handshake),
    Tokens {
        tokens: Vec<TokenId>,
    },
    Text {
        text: String,
    },
    Logits {
        logits: Vec<f64>,
    },
    Score {
        score: f64,
        #[serde(default)]
        dimensions: BTreeMap<String, f64>,
    },
    Vector {
        vector: Vec<f64>,
    },
    Error {
        code: String,
        message: String,
    },
}

/// Bounded retry with exponential backoff, applied to transport failures only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(120),
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn open(addr: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let transport = |e: std::io::Error| ProviderError::Transport(format!("{addr}: {e}"));
        let sock = addr
            .to_socket_addrs()
            .map_err(transport)?
            .next()
            .ok_or_else(|| ProviderError::Transport(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(transport)?;
        stream.set_read_timeout(Some(timeout)).map_err(transport)?;
        stream.set_write_timeout(Some(timeout)).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        let writer = stream.try_clone().map_err(transport)?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
        })
    }

    fn round_trip(&mut self, line: &str) -> Result<BridgeResponse, ProviderError> {
        let transport = |e: std::io::Error| ProviderError::Transport(e.to_string());
        self.writer.write_all(line.as_bytes()).map_err(transport)?;
        self.writer.write_all(b"\n").map_err(transport)?;
        self.writer.flush().map_err(transport)?;
        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(transport)?;
        if n == 0 {
            return Err(ProviderError::Transport("connection closed by bridge".into()));
        }
        serde_json::from_str(reply.trim_end())
            .map_err(|e| ProviderError::Malformed(format!("{e}: {}", truncate(&reply, 120))))
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Pooled connection to a bridge service.
pub struct BridgeClient {
    addr: String,
    retry: RetryPolicy,
    pool: Mutex<Vec<Connection>>,
    handshake: Handshake,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("addr", &self.addr)
            .field("handshake", &self.handshake)
            .finish()
    }
}

impl BridgeClient {
    /// Connects and performs the handshake.
    pub fn connect(addr: &str, retry: RetryPolicy) -> Result<Self, ProviderError> {
        let mut client = Self {
            addr: addr.to_owned(),
            retry,
            pool: Mutex::new(Vec::new()),
            handshake: Handshake {
                protocol_version: PROTOCOL_VERSION,
                vocab_size: 0,
                tokenizer_id: String::new(),
                embed_dim: 0,
                eos_token_id: None,
            },
        };
        let reply = client.call(&BridgeRequest::Handshake {
            protocol_version: PROTOCOL_VERSION,
        })?;
        let hs = match reply {
            BridgeResponse::Handshake(hs) => hs,
            other => return Err(unexpected("handshake", &other)),
        };
        if hs.protocol_version != PROTOCOL_VERSION {
            return Err(ProviderError::Malformed(format!(
                "bridge speaks protocol {}, expected {PROTOCOL_VERSION}",
                hs.protocol_version
            )));
        }
        if hs.vocab_size == 0 {
            return Err(ProviderError::Malformed("bridge advertised vocab_size 0".into()));
        }
        client.handshake = hs;
        Ok(client)
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Sends one request, retrying transport failures with exponential backoff.
    /// Error replies from the bridge are returned as [`ProviderError::Remote`].
    pub fn call(&self, request: &BridgeRequest) -> Result<BridgeResponse, ProviderError> {
        let line = serde_json::to_string(request)
            .map_err(|e| ProviderError::Parameter(format!("cannot encode request: {e}")))?;
        let attempts = self.retry.attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut last_err = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            let leased = self.pool.lock().expect("pool lock").pop();
            let mut conn = match leased {
                Some(c) => c,
                None => match Connection::open(&self.addr, self.retry.timeout) {
                    Ok(c) => c,
                    Err(e) => {
                        log::warn!("bridge connect attempt {} failed: {e}", attempt + 1);
                        last_err = Some(e);
                        continue;
                    }
                },
            };
            match conn.round_trip(&line) {
                Ok(BridgeResponse::Error { code, message }) => {
                    self.pool.lock().expect("pool lock").push(conn);
                    return Err(ProviderError::Remote { code, message });
                }
                Ok(reply) => {
                    self.pool.lock().expect("pool lock").push(conn);
                    return Ok(reply);
                }
                Err(e @ ProviderError::Transport(_)) => {
                    log::warn!("bridge request attempt {} failed: {e}", attempt + 1);
                    last_err = Some(e);
                }
                // The stream may be out of sync after a bad line; drop the connection.
                Err(e) => return Err(e),
            }
        }
        Err(last_err.unwrap_or_else(|| ProviderError::Transport("no attempts made".into())))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        match self.call(&BridgeRequest::Tokenize { text: text.into() })? {
            BridgeResponse::Tokens { tokens } => Ok(tokens),
            other => Err(unexpected("tokens", &other)),
        }
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        match self.call(&BridgeRequest::Detokenize {
            tokens: tokens.to_vec(),
        })? {
            BridgeResponse::Text { text } => Ok(text),
            other => Err(unexpected("text", &other)),
        }
    }

    pub fn logits(
        &self,
        context: &[TokenId],
        role: ModelRole,
        temperature_hint: Option<f64>,
    ) -> Result<Vec<f64>, ProviderError> {
        let reply = self.call(&BridgeRequest::Logits {
            context_token_ids: context.to_vec(),
            model_role: role,
            temperature_hint,
        })?;
        let logits = match reply {
            BridgeResponse::Logits { logits } => logits,
            other => return Err(unexpected("logits", &other)),
        };
        if logits.len() != self.handshake.vocab_size {
            return Err(ProviderError::VocabMismatch {
                expected: self.handshake.vocab_size,
                got: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::Malformed("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Primary toxicity score plus per-dimension scores.
    pub fn toxicity(&self, text: &str) -> Result<(f64, BTreeMap<String, f64>), ProviderError> {
        match self.call(&BridgeRequest::Toxicity { text: text.into() })? {
            BridgeResponse::Score { score, dimensions } if (0.0..=1.0).contains(&score) => {
                Ok((score, dimensions))
            }
            BridgeResponse::Score { score, .. } => Err(ProviderError::Malformed(format!(
                "toxicity score {score} outside [0, 1]"
            ))),
            other => Err(unexpected("score", &other)),
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        match self.call(&BridgeRequest::Embed { text: text.into() })? {
            BridgeResponse::Vector { vector } if vector.len() == self.handshake.embed_dim => {
                Ok(vector)
            }
            BridgeResponse::Vector { vector } => Err(ProviderError::Malformed(format!(
                "embedding has {} dims, handshake said {}",
                vector.len(),
                self.handshake.embed_dim
            ))),
            other => Err(unexpected("vector", &other)),
        }
    }
}

fn unexpected(wanted: &str, got: &BridgeResponse) -> ProviderError {
    ProviderError::Malformed(format!("expected a `{wanted}` reply, got {got:?}"))
}

/// One model role served by a bridge.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    client: Arc<BridgeClient>,
    role: ModelRole,
    temperature_hint: Option<f64>,
}

impl RemoteProvider {
    pub fn new(client: Arc<BridgeClient>, role: ModelRole) -> Self {
        Self {
            client,
            role,
            temperature_hint: None,
        }
    }

    pub fn with_temperature_hint(mut self, hint: f64) -> Self {
        self.temperature_hint = Some(hint);
        self
    }
}

impl DistributionProvider for RemoteProvider {
    fn vocab_size(&self) -> usize {
        self.client.handshake.vocab_size
    }

    fn tokenizer_id(&self) -> &str {
        &self.client.handshake.tokenizer_id
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.client.handshake.eos_token_id
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        self.client.logits(context, self.role, self.temperature_hint)
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        self.client.tokenize(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        self.client.detokenize(tokens)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteScorer {
    client: Arc<BridgeClient>,
}

impl RemoteScorer {
    pub fn new(client: Arc<BridgeClient>) -> Self {
        Self { client }
    }
}

impl ToxicityScorer for RemoteScorer {
    fn name(&self) -> &str {
        "bridge"
    }

    fn score(&self, text: &str) -> Result<f64, RankingError> {
        self.client
            .toxicity(text)
            .map(|(score, _)| score)
            .map_err(|e| RankingError::Scorer {
                name: "bridge".into(),
                message: e.to_string(),
            })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: Arc<BridgeClient>,
}

impl RemoteEmbedder {
    pub fn new(client: Arc<BridgeClient>) -> Self {
        Self { client }
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn name(&self) -> &str {
        "bridge"
    }

    fn dim(&self) -> usize {
        self.client.handshake.embed_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RankingError> {
        self.client.embed(text).map_err(|e| RankingError::Embedder {
            name: "bridge".into(),
            message: e.to_string(),
        })
    }
}
