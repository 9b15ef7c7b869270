//! Resolves `kind:argument` specs for models, scorers and embedders.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use detox_core::bridge::{
    BridgeClient, ModelRole, RemoteEmbedder, RemoteProvider, RemoteScorer, RetryPolicy,
};
use detox_core::providers::{DistributionProvider, NgramModel, ProviderError};
use detox_core::ranking::{BowEmbedder, LexiconScorer, TextEmbedder, ToxicityScorer};
use detox_core::text::Lexicon;

use crate::Failure;

fn split(spec: &str) -> Result<(&str, &str), Failure> {
    match spec.split_once(':') {
        Some((kind, arg)) if !arg.is_empty() => Ok((kind, arg)),
        _ => Err(Failure::config(format!("malformed spec `{spec}` (expected KIND:ARG)"))),
    }
}

pub fn provider_failure(e: ProviderError) -> Failure {
    match e {
        e if e.is_remote() => Failure::remote(e),
        e @ (ProviderError::Io(_) | ProviderError::Format { .. }) => Failure::io(e),
        e => Failure::config(e),
    }
}

/// Opens bridge connections on demand. Specs naming the same address share a client.
#[derive(Default)]
pub struct Bridges {
    clients: HashMap<String, Arc<BridgeClient>>,
}

impl Bridges {
    fn client(&mut self, addr: &str) -> Result<Arc<BridgeClient>, Failure> {
        if let Some(c) = self.clients.get(addr) {
            return Ok(c.clone());
        }
        log::info!("connecting to bridge at {addr}");
        let client = BridgeClient::connect(addr, RetryPolicy::default())
            .map(Arc::new)
            .map_err(|e| Failure::remote(format!("bridge {addr}: {e}")))?;
        self.clients.insert(addr.to_owned(), client.clone());
        Ok(client)
    }

    pub fn provider(
        &mut self,
        spec: &str,
        role: ModelRole,
    ) -> Result<Box<dyn DistributionProvider>, Failure> {
        match split(spec)? {
            ("ngram", path) => {
                let model = NgramModel::load(Path::new(path)).map_err(|e| {
                    Failure::io(format!("cannot load n-gram model {path}: {e}"))
                })?;
                Ok(Box::new(model))
            }
            ("bridge", addr) => Ok(Box::new(RemoteProvider::new(self.client(addr)?, role))),
            (kind, _) => Err(Failure::config(format!(
                "unknown model kind `{kind}` (expected ngram or bridge)"
            ))),
        }
    }

    pub fn scorer(&mut self, spec: &str) -> Result<Box<dyn ToxicityScorer>, Failure> {
        match split(spec)? {
            ("lexicon", path) => {
                let lexicon = load_lexicon(path)?;
                Ok(Box::new(LexiconScorer::new(lexicon).map_err(Failure::config)?))
            }
            ("bridge", addr) => Ok(Box::new(RemoteScorer::new(self.client(addr)?))),
            (kind, _) => Err(Failure::config(format!(
                "unknown scorer kind `{kind}` (expected lexicon or bridge)"
            ))),
        }
    }

    pub fn embedder(&mut self, spec: &str) -> Result<Box<dyn TextEmbedder>, Failure> {
        match split(spec)? {
            ("bow", dim) => {
                let dim: usize = dim
                    .parse()
                    .map_err(|_| Failure::config(format!("bad embedding size `{dim}`")))?;
                Ok(Box::new(BowEmbedder::new(dim).map_err(Failure::config)?))
            }
            ("bridge", addr) => Ok(Box::new(RemoteEmbedder::new(self.client(addr)?))),
            (kind, _) => Err(Failure::config(format!(
                "unknown embedder kind `{kind}` (expected bow or bridge)"
            ))),
        }
    }
}

pub fn load_lexicon(path: &str) -> Result<Lexicon, Failure> {
    let lexicon = Lexicon::load(Path::new(path))
        .map_err(|e| Failure::io(format!("cannot read lexicon {path}: {e}")))?;
    if lexicon.is_empty() {
        return Err(Failure::config(format!("lexicon {path} has no stems")));
    }
    Ok(lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_errors() {
        let mut b = Bridges::default();
        assert_eq!(b.embedder("bow").err().unwrap().code, 2);
        assert_eq!(b.embedder("bow:x").err().unwrap().code, 2);
        assert_eq!(b.embedder("glove:50").err().unwrap().code, 2);
        assert_eq!(b.scorer("lexicon:/nonexistent/lex.txt").err().unwrap().code, 3);
        assert_eq!(b.provider("gpt:x", ModelRole::Base).err().unwrap().code, 2);
        assert_eq!(b.embedder("bow:16").unwrap().dim(), 16);
    }
}
