//! Source-file loaders and the prepared-dataset artifacts written by
//! `prepare`.
//!
//! Loaders never fail on a single bad line: malformed lines are counted and
//! skipped, and only a malformed share above 10% is an error. Blank lines and
//! a leading header line are not counted.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use llrec_core::data::{Interaction, ItemCatalog, ItemMeta, ItemRecord, UserSplit};
use serde_json::Value;

use crate::error::{Error, Result};

/// Largest tolerated share of malformed lines.
pub const MALFORMED_LIMIT: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `user::item::rating::timestamp`; movies `id::title::genre|genre`.
    MovielensDat,
    /// One JSON object per line.
    Jsonl,
    /// Tab-separated, same field order as `MovielensDat`.
    Tsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-dat" => Ok(Self::MovielensDat),
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(Error::UnknownFormat(other.into())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MovielensDat => "movielens-dat",
            Self::Jsonl => "jsonl",
            Self::Tsv => "tsv",
        })
    }
}

/// Parsed rows plus the bookkeeping needed to report skipped lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded<T> {
    pub rows: Vec<T>,
    /// Non-blank data lines seen (header excluded).
    pub lines: usize,
    pub malformed: usize,
}

fn split_fields(line: &str, format: Format) -> Vec<&str> {
    match format {
        Format::MovielensDat => line.split("::").collect(),
        _ => line.split('\t').collect(),
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    s.parse::<i64>().ok().or_else(|| {
        let f = s.parse::<f64>().ok()?;
        (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
    })
}

fn json_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn json_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// One interaction line, or `None` if it does not have the format's shape.
pub fn parse_interaction(line: &str, format: Format) -> Option<Interaction> {
    let (user, item, rating, ts) = match format {
        Format::Jsonl => {
            let v: Value = serde_json::from_str(line).ok()?;
            let ts = json_number(v.get("timestamp")?)?;
            if ts.fract() != 0.0 {
                return None;
            }
            (
                json_text(v.get("user")?)?,
                json_text(v.get("item")?)?,
                json_number(v.get("rating")?)? as f32,
                ts as i64,
            )
        }
        _ => {
            let f = split_fields(line, format);
            if f.len() != 4 || f[0].trim().is_empty() || f[1].trim().is_empty() {
                return None;
            }
            (
                f[0].trim().to_string(),
                f[1].trim().to_string(),
                f[2].trim().parse::<f32>().ok()?,
                parse_timestamp(f[3])?,
            )
        }
    };
    Some(Interaction {
        user,
        item,
        rating,
        timestamp: ts,
    })
}

/// One metadata line. MovieLens genre lists `a|b` become `a b`; a missing
/// genre field is allowed in tsv.
pub fn parse_metadata(line: &str, format: Format) -> Option<ItemMeta> {
    let (raw_id, title, genre) = match format {
        Format::Jsonl => {
            let v: Value = serde_json::from_str(line).ok()?;
            let genre = match v.get("genre") {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => s.clone(),
                Some(Value::Array(a)) => {
                    let parts: Option<Vec<&str>> = a.iter().map(Value::as_str).collect();
                    parts?.join(" ")
                }
                Some(_) => return None,
            };
            let title = match v.get("title") {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => s.clone(),
                Some(_) => return None,
            };
            (json_text(v.get("item")?)?, title, genre)
        }
        Format::MovielensDat => {
            let f = split_fields(line, format);
            if f.len() != 3 {
                return None;
            }
            (
                f[0].trim().to_string(),
                f[1].trim().to_string(),
                f[2].trim().replace('|', " "),
            )
        }
        Format::Tsv => {
            let f = split_fields(line, format);
            if !(2..=3).contains(&f.len()) {
                return None;
            }
            let genre = f.get(2).map_or(String::new(), |g| g.trim().replace('|', " "));
            (f[0].trim().to_string(), f[1].trim().to_string(), genre)
        }
    };
    if raw_id.is_empty() || (title.is_empty() && genre.is_empty()) {
        return None;
    }
    Some(ItemMeta { raw_id, title, genre })
}

/// UTF-8 where valid, otherwise each byte as its Latin-1 code point (the
/// original MovieLens `.dat` files are Latin-1).
fn decode_line(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

fn looks_like_header(line: &str) -> bool {
    let first = line.split(['\t', ':']).next().unwrap_or("").trim().to_ascii_lowercase();
    first.starts_with("user") || first.starts_with("item")
}

fn load_with<T>(path: &Path, format: Format, parse: impl Fn(&str, Format) -> Option<T>) -> Result<Loaded<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Loaded {
        rows: Vec::new(),
        lines: 0,
        malformed: 0,
    };
    for (n, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = decode_line(raw);
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse(line, format) {
            Some(row) => out.rows.push(row),
            None if n == 0 && format != Format::Jsonl && looks_like_header(line) => continue,
            None => out.malformed += 1,
        }
        out.lines += 1;
    }
    if out.malformed as f64 > MALFORMED_LIMIT * out.lines as f64 {
        return Err(Error::TooManyMalformed {
            path: path.into(),
            malformed: out.malformed,
            lines: out.lines,
        });
    }
    Ok(out)
}

pub fn load_interactions(path: &Path, format: Format) -> Result<Loaded<Interaction>> {
    load_with(path, format, parse_interaction)
}

pub fn load_metadata(path: &Path, format: Format) -> Result<Loaded<ItemMeta>> {
    load_with(path, format, parse_metadata)
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

/// `index \t raw_id \t title \t genre`, one row per item in index order.
pub fn write_items(path: &Path, catalog: &ItemCatalog) -> Result<()> {
    let mut s = String::new();
    for it in catalog.items() {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            it.index,
            clean(&it.raw_id),
            clean(&it.title),
            clean(&it.genre)
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_items(path: &Path) -> Result<ItemCatalog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let index = f.first().and_then(|x| x.parse::<usize>().ok());
        match (index, f.len()) {
            (Some(index), 4) if index == n => items.push(ItemRecord {
                raw_id: f[1].into(),
                index,
                title: f[2].into(),
                genre: f[3].into(),
            }),
            _ => {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected `{n}\\traw\\ttitle\\tgenre`", n + 1),
                ))
            }
        }
    }
    Ok(ItemCatalog::new(items)?)
}

fn join(items: &[usize]) -> String {
    items.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// `user \t raw_user \t train indices (space separated) \t valid \t test`.
pub fn write_splits(path: &Path, splits: &[UserSplit], raw_users: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    for sp in splits {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            sp.user,
            clean(&raw_users[sp.user]),
            join(&sp.train),
            sp.valid,
            sp.test
        ));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Splits with the raw user ids, checked against a catalog of `num_items`.
pub fn read_splits(path: &Path, num_items: usize) -> Result<(Vec<UserSplit>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut splits = Vec::new();
    let mut raw = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || Error::parse(path, format!("line {}: malformed split row", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 || f[0].parse::<usize>().ok() != Some(n) {
            return Err(bad());
        }
        let train: Vec<usize> = f[2]
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let valid: usize = f[3].parse().map_err(|_| bad())?;
        let test: usize = f[4].parse().map_err(|_| bad())?;
        if train.is_empty() || train.iter().chain([&valid, &test]).any(|&i| i >= num_items) {
            return Err(bad());
        }
        splits.push(UserSplit {
            user: n,
            train,
            valid,
            test,
        });
        raw.push(f[1].to_string());
    }
    if splits.is_empty() {
        return Err(Error::parse(path, "no users"));
    }
    Ok((splits, raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movielens_line() {
        let x = parse_interaction("1::1193::5::978300760", Format::MovielensDat).unwrap();
        assert_eq!(
            (x.user.as_str(), x.item.as_str(), x.rating, x.timestamp),
            ("1", "1193", 5.0, 978300760)
        );
        let m = parse_metadata("1::Toy Story (1995)::Animation|Children's|Comedy", Format::MovielensDat).unwrap();
        assert_eq!(m.title, "Toy Story (1995)");
        assert_eq!(m.genre, "Animation Children's Comedy");
    }

    #[test]
    fn tsv_line() {
        let x = parse_interaction("u1\ti9\t4\t100", Format::Tsv).unwrap();
        assert_eq!(
            (x.user.as_str(), x.item.as_str(), x.rating, x.timestamp),
            ("u1", "i9", 4.0, 100)
        );
        assert!(parse_interaction("u1\ti9\t4", Format::Tsv).is_none());
        assert!(parse_interaction("u1\ti9\t4\tlater", Format::Tsv).is_none());
        assert_eq!(
            parse_interaction("u\ti\t1\t881250949.0", Format::Tsv)
                .unwrap()
                .timestamp,
            881250949
        );
    }

    #[test]
    fn jsonl_line() {
        let x = parse_interaction(
            r#"{"user": 3, "item": "B0", "rating": 4.5, "timestamp": 7}"#,
            Format::Jsonl,
        )
        .unwrap();
        assert_eq!(
            (x.user.as_str(), x.item.as_str(), x.rating, x.timestamp),
            ("3", "B0", 4.5, 7)
        );
        assert!(parse_interaction(r#"{"user": 3, "item": "B0", "timestamp": 7}"#, Format::Jsonl).is_none());
        let m = parse_metadata(
            r#"{"item": "B0", "title": "Mug", "genre": ["Home", "Kitchen"]}"#,
            Format::Jsonl,
        )
        .unwrap();
        assert_eq!(m.genre, "Home Kitchen");
    }

    #[test]
    fn format_names_round_trip() {
        for f in [Format::MovielensDat, Format::Jsonl, Format::Tsv] {
            assert_eq!(f.to_string().parse::<Format>().unwrap(), f);
        }
        assert!(matches!("csv".parse::<Format>(), Err(Error::UnknownFormat(_))));
    }

    #[test]
    fn latin1_fallback() {
        assert_eq!(decode_line(b"Caf\xe9"), "Café");
    }
}
