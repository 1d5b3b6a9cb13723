// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer and the evaluator chat template.
//!
//! Token ids 0..=255 are raw bytes. Five special tokens follow: beginning of
//! sequence, the system and user role markers, and the two answer words.

use crate::error::{Error, Result};

pub const BOS_TOKEN: u32 = 256;
pub const SYSTEM_TOKEN: u32 = 257;
pub const USER_TOKEN: u32 = 258;
pub const HIGH_TOKEN: u32 = 259;
pub const LOW_TOKEN: u32 = 260;
/// Smallest vocabulary that covers bytes plus special tokens.
pub const MIN_VOCAB: usize = 261;

pub const SYSTEM_PROMPT: &str = "You are an evaluator trained to assess perceived trustworthiness\u{2013} \
that is, whether you think a review seems trustworthy or not";
pub const USER_PREFIX: &str = "Review: ";
pub const USER_SUFFIX: &str =
    ", After reading the product review, respond with ONLY ONE WORD: 'high' or 'low'. Answer:";

/// A rendered, tokenized prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub tokens: Vec<u32>,
    /// Review bytes dropped to fit the context window.
    pub dropped: usize,
}

/// The prompt as display text, role markers included.
pub fn render_prompt(review: &str) -> String {
    format!("<|system|>{SYSTEM_PROMPT}<|user|>{USER_PREFIX}{review}{USER_SUFFIX}")
}

/// Number of template tokens surrounding the review.
pub fn template_token_count() -> usize {
    3 + SYSTEM_PROMPT.len() + USER_PREFIX.len() + USER_SUFFIX.len()
}

/// Tokenizes `review` inside the template, dropping review bytes from the
/// end until the whole sequence fits in `max_context`.
pub fn format_prompt(review: &str, max_context: usize) -> Result<PromptTokens> {
    let body = review.as_bytes();
    if body.is_empty() {
        return Err(Error::EmptyReview);
    }
    let fixed = template_token_count();
    if fixed + 1 > max_context {
        return Err(Error::Config(format!(
            "max_context {max_context} cannot hold the {fixed}-token template plus one review token"
        )));
    }
    let keep = body.len().min(max_context - fixed);
    let mut tokens = Vec::with_capacity(fixed + keep);
    tokens.push(BOS_TOKEN);
    tokens.push(SYSTEM_TOKEN);
    tokens.extend(SYSTEM_PROMPT.bytes().map(u32::from));
    tokens.push(USER_TOKEN);
    tokens.extend(USER_PREFIX.bytes().map(u32::from));
    tokens.extend(body[..keep].iter().map(|&b| u32::from(b)));
    tokens.extend(USER_SUFFIX.bytes().map(u32::from));
    Ok(PromptTokens {
        tokens,
        dropped: body.len() - keep,
    })
}
