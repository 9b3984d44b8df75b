//! Interaction log parsing, rating binarization and the user/item
//! frequency (k-core) filter.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Binary feedback label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    No = 0,
    Yes = 1,
}

impl Label {
    pub fn is_yes(self) -> bool {
        self == Label::Yes
    }

    pub fn as_f64(self) -> f64 {
        if self.is_yes() {
            1.0
        } else {
            0.0
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Label::Yes => "Yes",
            Label::No => "No",
        }
    }
}

impl From<bool> for Label {
    fn from(b: bool) -> Self {
        if b {
            Label::Yes
        } else {
            Label::No
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::No),
            1 => Ok(Label::Yes),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// One timestamped (user, item, rating) event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub rating: f64,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl Interaction {
    /// Global chronological order with (user, item) tie-breaks.
    pub fn sort_key(&self) -> (i64, &str, &str) {
        (self.timestamp, &self.user_id, &self.item_id)
    }

    pub fn require_label(&self) -> Result<Label> {
        self.label.ok_or_else(|| {
            Error::Invalid(format!(
                "interaction ({}, {}, {}) has no label; run binarize first",
                self.user_id, self.item_id, self.timestamp
            ))
        })
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.user_id.trim().is_empty() {
            return Err("empty user id".into());
        }
        if self.item_id.trim().is_empty() {
            return Err("empty item id".into());
        }
        if self.item_title.trim().is_empty() {
            return Err("empty item title".into());
        }
        if !(1.0..=5.0).contains(&self.rating) {
            return Err(format!("rating {} outside [1, 5]", self.rating));
        }
        if self.timestamp <= 0 {
            return Err(format!("non-positive timestamp {}", self.timestamp));
        }
        Ok(())
    }
}

pub fn sort_chronologically(interactions: &mut [Interaction]) {
    interactions.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Csv,
    Jsonl,
}

/// Column (CSV) or key (JSONL) names for each interaction field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub user: String,
    pub item: String,
    pub title: String,
    pub rating: String,
    pub timestamp: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            user: "user_id".into(),
            item: "item_id".into(),
            title: "item_title".into(),
            rating: "rating".into(),
            timestamp: "timestamp".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseReport {
    pub interactions: Vec<Interaction>,
    pub malformed: Vec<MalformedRow>,
    pub rows_total: usize,
}

pub const DEFAULT_MALFORMED_TOLERANCE: f64 = 0.05;

pub fn parse_log(
    path: &Path,
    format: LogFormat,
    fields: &FieldMap,
    malformed_tolerance: f64,
) -> Result<ParseReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(BufReader::new(file), format, fields, malformed_tolerance)
}

/// Parses an interaction log from any reader. Well-formed rows become
/// unlabeled interactions; malformed rows are excluded and counted, and
/// the whole parse fails when their fraction exceeds `malformed_tolerance`.
pub fn parse_reader<R: Read>(
    reader: R,
    format: LogFormat,
    fields: &FieldMap,
    malformed_tolerance: f64,
) -> Result<ParseReport> {
    let rows = match format {
        LogFormat::Csv => parse_csv_rows(reader, fields)?,
        LogFormat::Jsonl => parse_jsonl_rows(reader, fields)?,
    };
    let rows_total = rows.len();
    let mut interactions = Vec::with_capacity(rows_total);
    let mut malformed = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        match row.and_then(|it| it.validate().map(|_| it)) {
            Ok(it) => interactions.push(it),
            Err(reason) => malformed.push(MalformedRow { row: i + 1, reason }),
        }
    }

    if rows_total > 0 {
        let frac = malformed.len() as f64 / rows_total as f64;
        if frac > malformed_tolerance {
            return Err(Error::TooManyMalformed {
                malformed: malformed.len(),
                total: rows_total,
                tolerance: malformed_tolerance,
                first: malformed
                    .first()
                    .map(|m| format!("row {}: {}", m.row, m.reason))
                    .unwrap_or_default(),
            });
        }
    }

    check_duplicates(&interactions)?;
    Ok(ParseReport {
        interactions,
        malformed,
        rows_total,
    })
}

type RowResult = std::result::Result<Interaction, String>;

fn parse_csv_rows<R: Read>(reader: R, fields: &FieldMap) -> Result<Vec<RowResult>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Invalid(format!("CSV header has no column '{name}'")))
    };
    let (cu, ci, ct, cr, cs) = (
        col(&fields.user)?,
        col(&fields.item)?,
        col(&fields.title)?,
        col(&fields.rating)?,
        col(&fields.timestamp)?,
    );

    let mut out = Vec::new();
    for record in rdr.records() {
        let row = match record {
            Ok(rec) => {
                let get = |c: usize| rec.get(c).ok_or_else(|| format!("missing column {c}"));
                (|| -> RowResult {
                    Ok(Interaction {
                        user_id: get(cu)?.trim().to_string(),
                        item_id: get(ci)?.trim().to_string(),
                        item_title: get(ct)?.trim().to_string(),
                        rating: parse_rating(get(cr)?)?,
                        timestamp: parse_timestamp(get(cs)?)?,
                        label: None,
                    })
                })()
            }
            Err(e) => Err(format!("csv: {e}")),
        };
        out.push(row);
    }
    Ok(out)
}

fn parse_jsonl_rows<R: Read>(reader: R, fields: &FieldMap) -> Result<Vec<RowResult>> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line.map_err(|e| Error::io("<jsonl input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_json_row(&line, fields));
    }
    Ok(out)
}

fn parse_json_row(line: &str, fields: &FieldMap) -> RowResult {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("json: {e}"))?;
    let obj = value.as_object().ok_or("row is not a JSON object")?;
    let text = |key: &str| -> std::result::Result<String, String> {
        match obj.get(key) {
            Some(serde_json::Value::String(s)) => Ok(s.trim().to_string()),
            Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
            Some(other) => Err(format!("field '{key}' has unexpected type: {other}")),
            None => Err(format!("missing field '{key}'")),
        }
    };
    Ok(Interaction {
        user_id: text(&fields.user)?,
        item_id: text(&fields.item)?,
        item_title: text(&fields.title)?,
        rating: parse_rating(&text(&fields.rating)?)?,
        timestamp: parse_timestamp(&text(&fields.timestamp)?)?,
        label: None,
    })
}

fn parse_rating(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("unparseable rating '{s}'"))?;
    if !r.is_finite() {
        return Err(format!("non-finite rating '{s}'"));
    }
    Ok(r)
}

fn parse_timestamp(s: &str) -> std::result::Result<i64, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("unparseable timestamp '{s}'"))
}

fn check_duplicates(interactions: &[Interaction]) -> Result<()> {
    let mut seen: HashMap<(&str, &str, i64), usize> = HashMap::new();
    let mut offenders = Vec::new();
    for it in interactions {
        let count = seen
            .entry((&it.user_id, &it.item_id, it.timestamp))
            .or_insert(0);
        *count += 1;
        if *count == 2 && offenders.len() < 5 {
            offenders.push(format!("({}, {}, {})", it.user_id, it.item_id, it.timestamp));
        }
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::DuplicateEvents(offenders))
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// rating > threshold
    #[default]
    StrictGreater,
    /// rating >= threshold
    GreaterEqual,
}

pub const DEFAULT_THRESHOLD: f64 = 4.0;

pub fn label_for(rating: f64, threshold: f64, rule: ThresholdRule) -> Label {
    match rule {
        ThresholdRule::StrictGreater => Label::from(rating > threshold),
        ThresholdRule::GreaterEqual => Label::from(rating >= threshold),
    }
}

pub fn binarize(
    mut interactions: Vec<Interaction>,
    threshold: f64,
    rule: ThresholdRule,
) -> Vec<Interaction> {
    for it in &mut interactions {
        it.label = Some(label_for(it.rating, threshold, rule));
    }
    interactions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRound {
    pub users_removed: usize,
    pub items_removed: usize,
    pub interactions_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<String>,
    pub input_digest: Option<String>,
    pub threshold: Option<f64>,
    pub rule: Option<ThresholdRule>,
    pub min_interactions: usize,
    pub interactions_in: usize,
    pub interactions_out: usize,
    pub rounds: Vec<FilterRound>,
}

/// A filtered, chronologically sorted interaction set.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub interactions: Vec<Interaction>,
    pub users: BTreeSet<String>,
    pub items: BTreeSet<String>,
    pub provenance: Provenance,
}

impl Catalog {
    /// Sorts `interactions` into global order and collects the user/item sets.
    pub fn new(mut interactions: Vec<Interaction>, provenance: Provenance) -> Self {
        sort_chronologically(&mut interactions);
        let users = interactions.iter().map(|i| i.user_id.clone()).collect();
        let items = interactions.iter().map(|i| i.item_id.clone()).collect();
        Catalog {
            interactions,
            users,
            items,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Iteratively drops users and items with fewer than `min_interactions`
/// events until every survivor meets the bound.
pub fn kcore_filter(interactions: Vec<Interaction>, min_interactions: usize) -> Result<Catalog> {
    if min_interactions == 0 {
        return Err(Error::Invalid("min_interactions must be positive".into()));
    }
    let interactions_in = interactions.len();
    let mut alive = interactions;
    let mut rounds = Vec::new();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for it in &alive {
            *user_counts.entry(&it.user_id).or_default() += 1;
            *item_counts.entry(&it.item_id).or_default() += 1;
        }
        let users_removed = user_counts.values().filter(|&&c| c < min_interactions).count();
        let items_removed = item_counts.values().filter(|&&c| c < min_interactions).count();
        if users_removed == 0 && items_removed == 0 {
            break;
        }
        let keep: Vec<bool> = alive
            .iter()
            .map(|it| {
                user_counts[it.user_id.as_str()] >= min_interactions
                    && item_counts[it.item_id.as_str()] >= min_interactions
            })
            .collect();
        let before = alive.len();
        let mut k = keep.into_iter();
        alive.retain(|_| k.next().unwrap_or(false));
        rounds.push(FilterRound {
            users_removed,
            items_removed,
            interactions_removed: before - alive.len(),
        });
    }
    if alive.is_empty() {
        return Err(Error::EmptyFixedPoint(min_interactions));
    }
    let provenance = Provenance {
        min_interactions,
        interactions_in,
        interactions_out: alive.len(),
        rounds,
        ..Provenance::default()
    };
    Ok(Catalog::new(alive, provenance))
}
