//! Attribute-to-caption expansion with the Refined Selecting (RS) threshold,
//! caption deduplication, and the token vocabulary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeRecord, AttributeSchema, FrequencyTable};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
const RESERVED: [&str; 4] = [PAD, SOS, EOS, UNK];

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Slot {
    Fixed { words: Vec<String> },
    Attribute { category: String, lead_words: Vec<String> },
}

/// Ordered fixed phrases and attribute slots.
///
/// The textual form groups a slot with its lead words in braces:
/// `a person {with <hair>} {in <weather>}`. Words outside braces are fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTemplate {
    pub slots: Vec<Slot>,
}

impl CaptionTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut slots = Vec::new();
        let mut fixed: Vec<String> = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            match rest.find('{') {
                Some(open) => {
                    fixed.extend(tokenize(&rest[..open]));
                    let close = rest[open..]
                        .find('}')
                        .map(|c| open + c)
                        .ok_or_else(|| Error::Template(format!("unclosed `{{` in `{text}`")))?;
                    let group = &rest[open + 1..close];
                    let lt = group
                        .find('<')
                        .ok_or_else(|| Error::Template(format!("group `{group}` has no <category>")))?;
                    let gt = group
                        .find('>')
                        .filter(|&gt| gt > lt)
                        .ok_or_else(|| Error::Template(format!("group `{group}` has no <category>")))?;
                    if !group[gt + 1..].trim().is_empty() {
                        return Err(Error::Template(format!(
                            "words after the attribute in `{group}` belong outside the group"
                        )));
                    }
                    if !fixed.is_empty() {
                        slots.push(Slot::Fixed {
                            words: std::mem::take(&mut fixed),
                        });
                    }
                    slots.push(Slot::Attribute {
                        category: group[lt + 1..gt].trim().to_string(),
                        lead_words: tokenize(&group[..lt]).collect(),
                    });
                    rest = &rest[close + 1..];
                }
                None => {
                    fixed.extend(tokenize(rest));
                    rest = "";
                }
            }
        }
        if !fixed.is_empty() {
            slots.push(Slot::Fixed { words: fixed });
        }
        Ok(Self { slots })
    }

    pub fn to_text(&self) -> String {
        let parts: Vec<String> = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Fixed { words } => words.join(" "),
                Slot::Attribute { category, lead_words } if lead_words.is_empty() => {
                    format!("{{<{category}>}}")
                }
                Slot::Attribute { category, lead_words } => {
                    format!("{{{} <{category}>}}", lead_words.join(" "))
                }
            })
            .collect();
        parts.join(" ")
    }

    pub fn attribute_categories(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().filter_map(|s| match s {
            Slot::Attribute { category, .. } => Some(category.as_str()),
            Slot::Fixed { .. } => None,
        })
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let mut seen = HashSet::new();
        for cat in self.attribute_categories() {
            if schema.category(cat).is_none() {
                return Err(Error::Template(format!("unknown category `{cat}`")));
            }
            if !seen.insert(cat) {
                return Err(Error::Template(format!("category `{cat}` used twice")));
            }
        }
        if seen.is_empty() {
            return Err(Error::Template("template has no attribute slot".into()));
        }
        Ok(())
    }
}

impl Serialize for CaptionTemplate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for CaptionTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        CaptionTemplate::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    pub alpha: f64,
}

impl RsConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("rs.alpha", format!("{alpha} is outside [0, 1]")));
        }
        Ok(Self { alpha })
    }
}

impl Default for RsConfig {
    fn default() -> Self {
        Self { alpha: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    tokens: Vec<String>,
    pub source_identity: u64,
}

impl Caption {
    /// Wraps interior tokens with the boundary markers.
    pub fn from_interior<I, S>(interior: I, source_identity: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![SOS.to_string()];
        for t in interior {
            let t: String = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) || t.to_lowercase() != t {
                return Err(Error::Caption(format!(
                    "token `{t}` must be lowercase and whitespace-free"
                )));
            }
            if RESERVED.contains(&t.as_str()) {
                return Err(Error::Caption(format!("reserved token `{t}` inside caption")));
            }
            tokens.push(t);
        }
        if tokens.len() < 2 {
            return Err(Error::Caption("caption has no interior tokens".into()));
        }
        tokens.push(EOS.to_string());
        Ok(Self {
            tokens,
            source_identity,
        })
    }

    pub fn from_text(text: &str, source_identity: u64) -> Result<Self> {
        Self::from_interior(tokenize(text), source_identity)
    }

    /// All tokens, boundary markers included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn interior(&self) -> &[String] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    /// Number of interior tokens.
    pub fn len(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn text(&self) -> String {
        self.interior().join(" ")
    }
}

/// Expands `record` through `template`, keeping an attribute slot (lead words
/// included) iff its appearance probability is at most `rs.alpha`.
pub fn generate_caption(
    record: &AttributeRecord,
    template: &CaptionTemplate,
    freq: &FrequencyTable,
    rs: RsConfig,
) -> Result<Caption> {
    let mut interior: Vec<String> = Vec::new();
    for slot in &template.slots {
        match slot {
            Slot::Fixed { words } => interior.extend(words.iter().flat_map(|w| tokenize(w))),
            Slot::Attribute { category, lead_words } => {
                let value = record.value(category).ok_or_else(|| {
                    Error::Template(format!("record of identity {} has no `{category}`", record.identity_id))
                })?;
                let p = freq
                    .probability(category, value)
                    .ok_or_else(|| Error::Template(format!("no frequency for {category}={value}")))?;
                if p <= rs.alpha {
                    interior.extend(lead_words.iter().flat_map(|w| tokenize(w)));
                    interior.extend(tokenize(value));
                }
            }
        }
    }
    Caption::from_interior(interior, record.identity_id)
}

pub fn generate_corpus(
    records: &[AttributeRecord],
    template: &CaptionTemplate,
    freq: &FrequencyTable,
    rs: RsConfig,
) -> Result<Vec<Caption>> {
    records
        .iter()
        .map(|r| generate_caption(r, template, freq, rs))
        .collect()
}

/// Indices of the records to keep: per identity, the first record of every
/// distinct caption. Order of the input is preserved.
pub fn rs_select(records: &[AttributeRecord], captions: &[Caption]) -> Result<Vec<usize>> {
    if records.len() != captions.len() {
        return Err(Error::LengthMismatch {
            left: records.len(),
            right: captions.len(),
        });
    }
    let mut seen: HashSet<(u64, &[String])> = HashSet::new();
    Ok(records
        .iter()
        .zip(captions)
        .enumerate()
        .filter(|(_, (r, c))| seen.insert((r.identity_id, c.tokens())))
        .map(|(i, _)| i)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary with ids in the order of `id_to_token`, which must start
    /// with the reserved tokens.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < RESERVED.len() || id_to_token.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Caption("vocabulary must start with the reserved tokens".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Caption(format!("token `{t}` listed twice")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, caption: &Caption) -> Vec<usize> {
        caption.tokens().iter().map(|t| self.id(t)).collect()
    }

    /// Ids of the words of `text`, without boundary markers.
    pub fn encode_phrase(&self, text: &str) -> Vec<usize> {
        tokenize(text).map(|t| self.id(&t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK).to_string()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.id_to_token)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(serde_json::from_str(&text)?)
    }
}

/// Tokens with corpus frequency at least `min_freq`, most frequent first, ties
/// broken lexicographically, after the four reserved ids.
pub fn build_vocabulary(captions: &[Caption], min_freq: usize) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::EmptyInput("build_vocabulary needs at least one caption"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in captions {
        for t in c.interior() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

pub fn encode_caption(caption: &Caption, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(caption)
}

/// One line of a caption corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: u64,
    pub cam: u64,
    pub caption: String,
}

pub fn save_corpus(path: &Path, records: &[AttributeRecord], captions: &[Caption]) -> Result<()> {
    if records.len() != captions.len() {
        return Err(Error::LengthMismatch {
            left: records.len(),
            right: captions.len(),
        });
    }
    let mut buf = Vec::new();
    for (r, c) in records.iter().zip(captions) {
        let line = CorpusLine {
            id: r.identity_id,
            cam: r.camera_id,
            caption: c.text(),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusLine>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(lines)
}
