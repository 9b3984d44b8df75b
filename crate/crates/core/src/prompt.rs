//! Per-user chronological sample sequences and prompt rendering.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::ingest::{Interaction, Label};
use crate::{Error, Result};

pub const DEFAULT_MAX_HISTORY: usize = 10;

pub const HISTORY_SLOT: &str = "{ITEM_TITLE_LIST}";
pub const TARGET_SLOT: &str = "{TARGET_ITEM_TITLE}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item_id: String,
    pub title: String,
    pub label: Label,
    pub timestamp: i64,
}

/// One (history, target, label) sample before rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub user_id: String,
    /// Position of the target within the user's sequence.
    pub index: usize,
    /// Oldest first.
    pub history: Vec<HistoryEntry>,
    pub target_item_id: String,
    pub target_title: String,
    pub label: Label,
    pub timestamp: i64,
}

impl RawSample {
    /// Samples with no prior interactions.
    pub fn is_cold(&self) -> bool {
        self.history.is_empty()
    }
}

/// Builds one sample per event for every user. Sample `n` targets the user's
/// `n`-th event and carries up to `max_history` strictly earlier events.
///
/// Output is keyed by user id; within a user, samples follow the global
/// chronological order of the input.
pub fn build_user_sequences(
    interactions: &[Interaction],
    max_history: usize,
) -> Result<BTreeMap<String, Vec<RawSample>>> {
    if max_history == 0 {
        return Err(Error::Invalid("max_history must be positive".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for it in interactions {
        by_user.entry(&it.user_id).or_default().push(it);
    }
    let mut out = BTreeMap::new();
    for (user, mut events) in by_user {
        events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut samples = Vec::with_capacity(events.len());
        for (n, target) in events.iter().enumerate() {
            // predecessors sharing the target's timestamp are not history
            let earlier = events[..n].partition_point(|e| e.timestamp < target.timestamp);
            let from = earlier.saturating_sub(max_history);
            let history = events[from..earlier]
                .iter()
                .map(|e| {
                    Ok(HistoryEntry {
                        item_id: e.item_id.clone(),
                        title: e.item_title.clone(),
                        label: e.require_label()?,
                        timestamp: e.timestamp,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(RawSample {
                user_id: user.to_string(),
                index: n,
                history,
                target_item_id: target.item_id.clone(),
                target_title: target.item_title.clone(),
                label: target.require_label()?,
                timestamp: target.timestamp,
            });
        }
        out.insert(user.to_string(), samples);
    }
    Ok(out)
}

/// Prompt template with `{ITEM_TITLE_LIST}` and `{TARGET_ITEM_TITLE}` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    /// Words for (positive, negative).
    pub label_vocabulary: (String, String),
    pub liked_mark: String,
    pub disliked_mark: String,
    pub separator: String,
    pub empty_history: String,
}

pub const DEFAULT_TEMPLATE_TEXT: &str = "Given the user's history of rated items, predict whether the user will like the target item. \
Answer only with \"Yes\" or \"No\".\n\
User history: {ITEM_TITLE_LIST}\n\
Target item: {TARGET_ITEM_TITLE}\n\
Will the user like the target item?";

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            text: DEFAULT_TEMPLATE_TEXT.to_string(),
            label_vocabulary: ("Yes".into(), "No".into()),
            liked_mark: "(liked)".into(),
            disliked_mark: "(disliked)".into(),
            separator: ", ".into(),
            empty_history: "no prior interactions".into(),
        }
    }
}

impl PromptTemplate {
    /// Default rendering options around a custom template body.
    pub fn from_text(text: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate {
            text: text.into(),
            ..PromptTemplate::default()
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(text.trim_end_matches('\n'))
    }

    pub fn validate(&self) -> Result<()> {
        for slot in [HISTORY_SLOT, TARGET_SLOT] {
            let count = self.text.matches(slot).count();
            if count != 1 {
                return Err(Error::Invalid(format!(
                    "template must contain {slot} exactly once (found {count})"
                )));
            }
        }
        let (yes, no) = &self.label_vocabulary;
        if yes.is_empty() || no.is_empty() || yes == no {
            return Err(Error::Invalid(
                "label vocabulary needs two distinct non-empty words".into(),
            ));
        }
        if self.separator.is_empty() {
            return Err(Error::Invalid("separator must be non-empty".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn label_word(&self, label: Label) -> &str {
        match label {
            Label::Yes => &self.label_vocabulary.0,
            Label::No => &self.label_vocabulary.1,
        }
    }

    /// Escapes a title so it cannot be confused with template structure:
    /// backslash, quotes, braces, newlines and the separator are escaped.
    pub fn escape_title(&self, title: &str) -> String {
        let mut s = String::with_capacity(title.len() + 2);
        for ch in title.chars() {
            match ch {
                '\\' => s.push_str("\\\\"),
                '"' => s.push_str("\\\""),
                '{' => s.push_str("\\{"),
                '}' => s.push_str("\\}"),
                '\n' => s.push_str("\\n"),
                '\r' => s.push_str("\\r"),
                c => s.push(c),
            }
        }
        if s.contains(&self.separator) {
            s = s.replace(&self.separator, &format!("\\{}", self.separator));
        }
        s
    }

    fn render_history(&self, history: &[HistoryEntry]) -> String {
        if history.is_empty() {
            return self.empty_history.clone();
        }
        history
            .iter()
            .map(|h| {
                let mark = match h.label {
                    Label::Yes => &self.liked_mark,
                    Label::No => &self.disliked_mark,
                };
                format!("\"{}\" {}", self.escape_title(&h.title), mark)
            })
            .collect::<Vec<_>>()
            .join(&self.separator)
    }
}

/// A rendered prompt `x` with its label `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub prompt_text: String,
    pub label: Label,
    pub index: usize,
    pub user_id: String,
    pub timestamp: i64,
    pub raw: RawSample,
}

pub fn render(sample: &RawSample, template: &PromptTemplate) -> RenderedSample {
    let history = template.render_history(&sample.history);
    let target = format!("\"{}\"", template.escape_title(&sample.target_title));
    // Single left-to-right pass so slot text inside titles is never re-expanded.
    let (h_pos, t_pos) = (
        template.text.find(HISTORY_SLOT).expect("validated template"),
        template.text.find(TARGET_SLOT).expect("validated template"),
    );
    let mut slots = [(h_pos, HISTORY_SLOT, history), (t_pos, TARGET_SLOT, target)];
    slots.sort_by_key(|s| s.0);
    let mut out = String::with_capacity(template.text.len() + 256);
    let mut cursor = 0;
    for (pos, slot, value) in &slots {
        out.push_str(&template.text[cursor..*pos]);
        out.push_str(value);
        cursor = pos + slot.len();
    }
    out.push_str(&template.text[cursor..]);

    RenderedSample {
        prompt_text: out,
        label: sample.label,
        index: sample.index,
        user_id: sample.user_id.clone(),
        timestamp: sample.timestamp,
        raw: sample.clone(),
    }
}

pub fn render_sequence(samples: &[RawSample], template: &PromptTemplate) -> Vec<RenderedSample> {
    samples.iter().map(|s| render(s, template)).collect()
}
