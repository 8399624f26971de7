//! Tab-separated interaction and item files.
//!
//! Interactions: `user_key<TAB>item_key<TAB>timestamp` (column order configurable).
//! Items: `item_key<TAB>title<TAB>f1,f2,...` where title and features may be empty.
//! Lines starting with `#` and blank lines are skipped.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Zero-based column positions of the three interaction fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnSpec {
    pub user: usize,
    pub item: usize,
    pub timestamp: usize,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            user: 0,
            item: 1,
            timestamp: 2,
        }
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

pub fn parse_interactions(text: &str, spec: ColumnSpec) -> Result<InteractionLog> {
    let width = spec.user.max(spec.item).max(spec.timestamp) + 1;
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut seqs: Vec<Vec<Interaction>> = Vec::new();
    let mut seen = HashSet::new();

    for (line, row) in content_lines(text) {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() < width {
            return Err(Error::Parse {
                line,
                msg: format!("expected at least {width} tab-separated fields, found {}", cols.len()),
            });
        }
        let (uk, ik) = (cols[spec.user].trim(), cols[spec.item].trim());
        if uk.is_empty() || ik.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty user or item key".into(),
            });
        }
        let ts: i64 = cols[spec.timestamp].trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("bad timestamp `{}`: {e}", cols[spec.timestamp]),
        })?;
        let u = *users.entry(uk.to_string()).or_insert_with(|| {
            user_keys.push(uk.to_string());
            seqs.push(Vec::new());
            user_keys.len() - 1
        });
        let i = *items.entry(ik.to_string()).or_insert_with(|| {
            item_keys.push(ik.to_string());
            item_keys.len() - 1
        });
        if seen.insert((u, i, ts)) {
            seqs[u].push(Interaction { item: i, timestamp: ts });
        }
    }
    if user_keys.is_empty() {
        return Err(Error::EmptyInput("interaction file has no rows".into()));
    }
    InteractionLog::new(seqs, user_keys, item_keys)
}

pub fn load_interactions(path: impl AsRef<Path>, spec: ColumnSpec) -> Result<InteractionLog> {
    parse_interactions(&fs::read_to_string(path)?, spec)
}

pub fn write_interactions(log: &InteractionLog, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("# user\titem\ttimestamp\n");
    for (u, seq) in log.sequences().iter().enumerate() {
        for x in seq {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                log.user_keys()[u],
                log.item_keys()[x.item],
                x.timestamp
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Raw content of one item as read from the item file.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemContent {
    pub key: String,
    pub title: Option<String>,
    pub features: Option<Vec<f64>>,
}

pub fn parse_items(text: &str) -> Result<Vec<ItemContent>> {
    let mut out = Vec::new();
    let mut keys = HashSet::new();
    for (line, row) in content_lines(text) {
        let mut cols = row.splitn(3, '\t');
        let key = cols.next().unwrap_or("").trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty item key".into(),
            });
        }
        if !keys.insert(key.to_string()) {
            return Err(Error::Parse {
                line,
                msg: format!("item `{key}` listed twice"),
            });
        }
        let title = cols.next().map(str::trim).filter(|t| !t.is_empty()).map(String::from);
        let features = match cols.next().map(str::trim).filter(|f| !f.is_empty()) {
            None => None,
            Some(f) => Some(
                f.split(',')
                    .map(|x| {
                        x.trim().parse::<f64>().map_err(|e| Error::Parse {
                            line,
                            msg: format!("bad feature `{x}`: {e}"),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
        };
        out.push(ItemContent {
            key: key.to_string(),
            title,
            features,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("item file has no rows".into()));
    }
    Ok(out)
}

pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<ItemContent>> {
    parse_items(&fs::read_to_string(path)?)
}

pub fn write_items(items: &[ItemContent], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("# item\ttitle\tfeatures\n");
    for it in items {
        let feats = it
            .features
            .as_ref()
            .map(|f| f.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        out.push_str(&format!("{}\t{}\t{}\n", it.key, it.title.as_deref().unwrap_or(""), feats));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `item_index<TAB>count` rows, already sorted by the caller.
pub fn write_histogram(hist: &[(usize, usize)], mut w: impl Write) -> Result<()> {
    for (item, count) in hist {
        writeln!(w, "{item}\t{count}")?;
    }
    Ok(())
}
