//! Smoke-free to smoke-inclusive caption rewriting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terms whose presence marks a caption as mentioning smoke.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SmokeLexicon(pub Vec<String>);

impl Default for SmokeLexicon {
    fn default() -> Self {
        Self(
            ["smoke", "plume", "smoke plume", "wildfire smoke"]
                .map(String::from)
                .to_vec(),
        )
    }
}

impl SmokeLexicon {
    /// Case-insensitive whole-word match of any term.
    pub fn mentions(&self, text: &str) -> bool {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        self.0.iter().any(|term| {
            let term: Vec<String> = term.split_whitespace().map(str::to_lowercase).collect();
            !term.is_empty() && words.windows(term.len()).any(|w| w == term.as_slice())
        })
    }
}

/// A language model that rewrites a caption to include smoke.
pub trait RewriteClient {
    fn rewrite(&self, caption: &str) -> Result<String>;
}

/// Offline rewriter: appends a fixed phrase before any trailing punctuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRewriter {
    pub phrase: String,
}

impl Default for TemplateRewriter {
    fn default() -> Self {
        Self {
            phrase: "with smoke".into(),
        }
    }
}

impl TemplateRewriter {
    pub fn apply(&self, caption: &str) -> String {
        let trimmed = caption.trim();
        let body = trimmed.trim_end_matches(['.', '!', '?', ',', ';', ':']);
        let tail = &trimmed[body.len()..];
        format!("{} {}{}", body.trim_end(), self.phrase, tail)
    }
}

/// Client attempts after the first before falling back to the template.
pub const REWRITE_RETRIES: usize = 2;

#[derive(Default)]
pub struct CaptionRewriter {
    pub client: Option<Box<dyn RewriteClient>>,
    pub lexicon: SmokeLexicon,
    pub template: TemplateRewriter,
}

impl CaptionRewriter {
    pub fn with_client(client: Box<dyn RewriteClient>) -> Self {
        Self {
            client: Some(client),
            ..Self::default()
        }
    }

    /// Returns a caption mentioning smoke. Captions that already do are
    /// returned unchanged.
    pub fn rewrite(&self, caption: &str) -> Result<String> {
        let caption = caption.trim();
        if caption.is_empty() {
            return Err(Error::invalid("cannot rewrite an empty caption"));
        }
        if self.lexicon.mentions(caption) {
            return Ok(caption.to_string());
        }
        if let Some(client) = &self.client {
            for attempt in 0..=REWRITE_RETRIES {
                match client.rewrite(caption) {
                    Ok(out) if !out.trim().is_empty() && self.lexicon.mentions(&out) => {
                        return Ok(out.trim().to_string());
                    }
                    Ok(out) => log::warn!("rewrite attempt {attempt} lacks smoke terms: {out:?}"),
                    Err(e) => log::warn!("rewrite attempt {attempt} failed: {e}"),
                }
            }
        }
        Ok(self.template.apply(caption))
    }
}

pub fn rewrite_caption(caption: &str, rewriter: &CaptionRewriter) -> Result<String> {
    rewriter.rewrite(caption)
}
