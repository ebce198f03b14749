//! Text formats for interactions and item embeddings.
//!
//! Interactions: one user per line, `user<TAB>item,item,...`, oldest first.
//!
//! Embeddings: a header `num_items dim`, then `item v1 ... v_dim` per line.
//! Values are decimal floats parsed with correct rounding, and written in
//! the shortest form that parses back to the same bits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use genrec_core::data::{EmbeddingTable, RawInteractions};

use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

pub fn parse_interactions(path: &Path, text: &str) -> Result<RawInteractions> {
    let mut out = RawInteractions::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (user, items) = line.split_once('\t').ok_or_else(|| parse_err(path, n, "expected `user<TAB>items`"))?;
        if user.is_empty() {
            return Err(parse_err(path, n, "empty user id"));
        }
        let items: Vec<String> = items.split(',').map(|s| s.trim().to_string()).collect();
        if items.iter().any(String::is_empty) {
            return Err(parse_err(path, n, "empty item id"));
        }
        if !seen.insert(user.to_string()) {
            return Err(parse_err(path, n, format!("duplicate user `{user}`")));
        }
        out.users.push((user.to_string(), items));
    }
    if out.users.is_empty() {
        return Err(parse_err(path, 0, "no interactions"));
    }
    Ok(out)
}

pub fn format_interactions(raw: &RawInteractions) -> String {
    let mut s = String::new();
    for (u, items) in &raw.users {
        let _ = writeln!(s, "{u}\t{}", items.join(","));
    }
    s
}

pub fn parse_embeddings(path: &Path, text: &str) -> Result<EmbeddingTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 0, "missing header"))?;
    let mut h = header.split_whitespace();
    let (Some(count), Some(dim), None) = (h.next(), h.next(), h.next()) else {
        return Err(parse_err(path, 1, "header must be `num_items dim`"));
    };
    let count: usize = count.parse().map_err(|_| parse_err(path, 1, "bad item count"))?;
    let dim: usize = dim.parse().map_err(|_| parse_err(path, 1, "bad dimension"))?;
    if dim == 0 {
        return Err(parse_err(path, 1, "dimension must be >= 1"));
    }
    let mut table = EmbeddingTable { dim, ..Default::default() };
    for (i, line) in lines {
        let n = i + 1;
        let mut fields = line.split_whitespace();
        let item = fields.next().ok_or_else(|| parse_err(path, n, "missing item id"))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(path, n, format!("`{f}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(parse_err(path, n, format!("{} values, expected {dim}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, n, "non-finite value"));
        }
        table.insert(item.to_string(), values).map_err(|e| parse_err(path, n, e.to_string()))?;
    }
    if table.rows.len() != count {
        return Err(parse_err(path, 1, format!("header announces {count} items, found {}", table.rows.len())));
    }
    Ok(table)
}

pub fn format_embeddings(table: &EmbeddingTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", table.rows.len(), table.dim);
    for (item, v) in &table.rows {
        s.push_str(item);
        for x in v {
            let _ = write!(s, " {x:?}");
        }
        s.push('\n');
    }
    s
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_interactions(path: &Path) -> Result<RawInteractions> {
    parse_interactions(path, &read_text(path)?)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    parse_embeddings(path, &read_text(path)?)
}
