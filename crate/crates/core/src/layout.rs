//! Token layouts with completion-only masking.
//!
//! A conversation compiles to a token stream partitioned into spans. Human text and chat
//! template separators are `ContextMasked`, each `<image>` expands to one
//! `ImagePlaceholder` span and only the assistant response tokens are `Target`. Under
//! causal attention the target of shot `i` then sees shots `0..i` in full plus its own
//! prompt, which is what makes a k-shot conversation train every 0..k-1-shot case at once.

use crate::model::{Conversation, Role, IMAGE_TAG};
use serde::{Deserialize, Serialize};

pub const IMAGE_PLACEHOLDER_ID: u32 = u32::MAX;

/// Maps text to token ids.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;

    /// Ids standing in for one image.
    fn image_placeholder(&self, cost: usize) -> Vec<u32> {
        vec![IMAGE_PLACEHOLDER_ID; cost]
    }
}

/// One token per whitespace-separated word; ids are FNV-1a hashes of the word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| 1 + fnv1a(w.as_bytes()) % 0x7fff_fffe).collect()
    }
}

/// One token per UTF-8 byte. Stands in for a byte-level BPE until a real vocabulary is
/// plugged in through [`Tokenizer`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

/// Role prefixes and turn delimiters wrapped around each turn. All of them are masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub human_prefix: String,
    pub human_suffix: String,
    pub gpt_prefix: String,
    pub gpt_suffix: String,
}

impl ChatTemplate {
    /// No separators: spans hold exactly the turn text.
    pub fn plain() -> Self {
        ChatTemplate {
            human_prefix: String::new(),
            human_suffix: String::new(),
            gpt_prefix: String::new(),
            gpt_suffix: String::new(),
        }
    }

    /// Vicuna v1 style `USER: ... ASSISTANT: ...</s>`.
    pub fn vicuna() -> Self {
        ChatTemplate {
            human_prefix: "USER: ".into(),
            human_suffix: " ".into(),
            gpt_prefix: "ASSISTANT: ".into(),
            gpt_suffix: " </s>".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub max_context: usize,
    pub image_token_cost: usize,
    pub reserve: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig { max_context: 2048, image_token_cost: 576, reserve: 128 }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.max_context <= self.image_token_cost + self.reserve {
            return Err(LayoutError::BadBudget(*self));
        }
        Ok(())
    }

    /// Tokens available to the compiled conversation.
    pub fn limit(&self) -> usize {
        self.max_context.saturating_sub(self.reserve)
    }

    /// Most images that fit when the text is empty.
    pub fn max_images(&self) -> usize {
        self.limit() / self.image_token_cost.max(1)
    }
}

/// Fails if `images` placeholders alone already exceed the budget.
pub fn check_budget(images: usize, cfg: &BudgetConfig) -> Result<(), LayoutError> {
    cfg.validate()?;
    if images > cfg.max_images() {
        return Err(LayoutError::TooManyImages { images, max: cfg.max_images() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    ContextMasked,
    ImagePlaceholder,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub role: SpanRole,
    pub shot_index: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<u32>,
    pub spans: Vec<Span>,
    pub total_len: usize,
}

impl TokenLayout {
    /// Copy without token ids, for corpus-wide mask statistics.
    pub fn spans_only(&self) -> TokenLayout {
        TokenLayout { tokens: Vec::new(), spans: self.spans.clone(), total_len: self.total_len }
    }

    pub fn target_tokens(&self) -> usize {
        self.spans.iter().filter(|s| s.role == SpanRole::Target).map(Span::len).sum()
    }

    pub fn shots(&self) -> usize {
        self.spans.last().map_or(0, |s| s.shot_index + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("budget {0:?} leaves no room for an image")]
    BadBudget(BudgetConfig),
    #[error("{images} images exceed the budget of {max}")]
    TooManyImages { images: usize, max: usize },
    #[error("shot {shot} exceeds the context budget ({len} > {limit} tokens)")]
    OverBudget { shot: usize, len: usize, limit: usize },
    #[error("empty target in shot {shot}")]
    EmptyTarget { shot: usize },
    #[error("conversation has no target turn")]
    NoTarget,
    #[error("invalid conversation: {0}")]
    Invalid(String),
}

struct Builder<'a, T: Tokenizer + ?Sized> {
    tok: &'a T,
    cfg: &'a BudgetConfig,
    tokens: Vec<u32>,
    spans: Vec<Span>,
}

impl<T: Tokenizer + ?Sized> Builder<'_, T> {
    fn push(&mut self, ids: Vec<u32>, role: SpanRole, shot: usize) -> Result<(), LayoutError> {
        if ids.is_empty() {
            return Ok(());
        }
        let start = self.tokens.len();
        self.tokens.extend(ids);
        let end = self.tokens.len();
        match self.spans.last_mut() {
            Some(last) if role == SpanRole::ContextMasked && last.role == role && last.shot_index == shot => {
                last.end = end
            }
            _ => self.spans.push(Span { start, end, role, shot_index: shot }),
        }
        if end > self.cfg.limit() {
            return Err(LayoutError::OverBudget { shot, len: end, limit: self.cfg.limit() });
        }
        Ok(())
    }

    fn text(&mut self, text: &str, shot: usize) -> Result<(), LayoutError> {
        let ids = self.tok.encode(text);
        self.push(ids, SpanRole::ContextMasked, shot)
    }
}

/// Compiles `c` into a span-annotated token stream.
pub fn compile<T: Tokenizer + ?Sized>(
    c: &Conversation,
    tok: &T,
    cfg: &BudgetConfig,
    template: &ChatTemplate,
) -> Result<TokenLayout, LayoutError> {
    cfg.validate()?;
    if let Some(v) = c.validate().first() {
        return Err(LayoutError::Invalid(v.to_string()));
    }
    let mut b = Builder { tok, cfg, tokens: Vec::new(), spans: Vec::new() };
    let mut targets = 0;
    for (i, turn) in c.turns.iter().enumerate() {
        let shot = i / 2;
        match turn.role {
            Role::Human => {
                b.text(&template.human_prefix, shot)?;
                for (j, piece) in turn.text.split(IMAGE_TAG).enumerate() {
                    if j > 0 {
                        let ids = tok.image_placeholder(cfg.image_token_cost);
                        b.push(ids, SpanRole::ImagePlaceholder, shot)?;
                    }
                    b.text(piece, shot)?;
                }
                b.text(&template.human_suffix, shot)?;
            }
            Role::Gpt => {
                b.text(&template.gpt_prefix, shot)?;
                let ids = tok.encode(&turn.text);
                if ids.is_empty() {
                    return Err(LayoutError::EmptyTarget { shot });
                }
                b.push(ids, SpanRole::Target, shot)?;
                targets += 1;
                b.text(&template.gpt_suffix, shot)?;
            }
        }
    }
    if targets == 0 {
        return Err(LayoutError::NoTarget);
    }
    let total_len = b.tokens.len();
    Ok(TokenLayout { tokens: b.tokens, spans: b.spans, total_len })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutViolation {
    #[error("span {index} starts at {start}, expected {expected}")]
    Gap { index: usize, start: usize, expected: usize },
    #[error("span {index} is empty")]
    EmptySpan { index: usize },
    #[error("spans end at {end}, total_len is {total_len}")]
    Coverage { end: usize, total_len: usize },
    #[error("shot index decreases at span {index}")]
    ShotOrder { index: usize },
    #[error("target of shot {shot} sees a span of later shot {later}")]
    SeesFuture { shot: usize, later: usize },
    #[error("target of shot {shot} does not see all of shot {missing}")]
    MissingContext { shot: usize, missing: usize },
    #[error("target of shot {shot} is not preceded by its own prompt")]
    MissingPrompt { shot: usize },
    #[error("shot {shot} has {targets} target spans")]
    TargetCount { shot: usize, targets: usize },
}

/// Spans must tile `[0, total_len)` with non-decreasing shot indices.
pub fn check_spans(l: &TokenLayout) -> Result<(), LayoutViolation> {
    let mut expected = 0;
    for (index, s) in l.spans.iter().enumerate() {
        if s.start != expected {
            return Err(LayoutViolation::Gap { index, start: s.start, expected });
        }
        if s.end <= s.start {
            return Err(LayoutViolation::EmptySpan { index });
        }
        if index > 0 && s.shot_index < l.spans[index - 1].shot_index {
            return Err(LayoutViolation::ShotOrder { index });
        }
        expected = s.end;
    }
    if expected != l.total_len {
        return Err(LayoutViolation::Coverage { end: expected, total_len: l.total_len });
    }
    Ok(())
}

/// Checks the any-shot property under left-only attention: the target of shot `i` is
/// preceded by every span of shots `0..i`, by shot `i`'s own prompt (including its
/// images), and by nothing from a later shot. In particular the first target sees no
/// earlier target.
pub fn verify_anyshot(l: &TokenLayout) -> Result<(), LayoutViolation> {
    check_spans(l)?;
    let shots = l.shots();
    let mut first_span = vec![usize::MAX; shots];
    let mut last_span = vec![0usize; shots];
    let mut last_image = vec![None; shots];
    let mut targets = vec![0usize; shots];
    for (i, s) in l.spans.iter().enumerate() {
        first_span[s.shot_index] = first_span[s.shot_index].min(i);
        last_span[s.shot_index] = i;
        match s.role {
            SpanRole::Target => targets[s.shot_index] += 1,
            SpanRole::ImagePlaceholder => last_image[s.shot_index] = Some(i),
            SpanRole::ContextMasked => {}
        }
    }
    for (i, s) in l.spans.iter().enumerate() {
        if s.role != SpanRole::Target {
            continue;
        }
        let shot = s.shot_index;
        if targets[shot] != 1 {
            return Err(LayoutViolation::TargetCount { shot, targets: targets[shot] });
        }
        if let Some(later) = l.spans[..i].iter().map(|p| p.shot_index).find(|&p| p > shot) {
            return Err(LayoutViolation::SeesFuture { shot, later });
        }
        if let Some(missing) = (0..shot).find(|&p| last_span[p] >= i || first_span[p] == usize::MAX) {
            return Err(LayoutViolation::MissingContext { shot, missing });
        }
        let own_prompt = first_span[shot] < i && l.spans[first_span[shot]].role == SpanRole::ContextMasked
            || first_span[shot] < i && l.spans[first_span[shot]].role == SpanRole::ImagePlaceholder;
        if !own_prompt || last_image[shot].is_some_and(|j| j > i) {
            return Err(LayoutViolation::MissingPrompt { shot });
        }
    }
    Ok(())
}

/// `true` exactly on target positions.
pub fn loss_mask(l: &TokenLayout) -> Vec<bool> {
    let mut mask = vec![false; l.total_len];
    for s in l.spans.iter().filter(|s| s.role == SpanRole::Target) {
        mask[s.start..s.end].iter_mut().for_each(|m| *m = true);
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutFailure {
    pub index: usize,
    pub error: String,
}

/// Corpus-wide compile-and-verify summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutAudit {
    pub conversations: usize,
    pub passed: usize,
    pub failures: Vec<LayoutFailure>,
    pub total_tokens: usize,
    pub target_tokens: usize,
    pub image_tokens: usize,
    /// Target tokens over all tokens of passing conversations.
    pub target_fraction: f64,
}

pub fn audit_corpus<T: Tokenizer + ?Sized>(
    convs: &[Conversation],
    tok: &T,
    cfg: &BudgetConfig,
    template: &ChatTemplate,
) -> LayoutAudit {
    let mut audit = LayoutAudit {
        conversations: convs.len(),
        passed: 0,
        failures: Vec::new(),
        total_tokens: 0,
        target_tokens: 0,
        image_tokens: 0,
        target_fraction: 0.0,
    };
    for (index, c) in convs.iter().enumerate() {
        let layout = compile(c, tok, cfg, template).map_err(|e| e.to_string());
        let checked = layout.and_then(|l| verify_anyshot(&l).map(|_| l).map_err(|e| e.to_string()));
        match checked {
            Ok(l) => {
                audit.passed += 1;
                audit.total_tokens += l.total_len;
                audit.target_tokens += l.target_tokens();
                audit.image_tokens +=
                    l.spans.iter().filter(|s| s.role == SpanRole::ImagePlaceholder).map(Span::len).sum::<usize>();
            }
            Err(error) => audit.failures.push(LayoutFailure { index, error }),
        }
    }
    audit.target_fraction = crate::scalar::fraction(audit.target_tokens, audit.total_tokens);
    audit
}
