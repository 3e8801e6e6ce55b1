//! Embedding tables and the on-disk formats shared by the CLI.
//!
//! Embeddings use the word2vec text layout: an optional `n d` header, then
//! one `token v₁ … v_d` row per line. Tokens are NFC-normalized on the way in
//! and matched case-sensitively.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::explore::{ComparisonTriplets, Triplet};
use crate::linalg::Matrix;

pub const MAX_DIM: usize = 4096;
pub const MAX_ROWS: usize = 10_000_000;

/// Vocabulary-labelled `n × d` matrix of embeddings, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    dim: usize,
}

/// Result of looking tokens up in a table: found indices in input order and
/// the tokens that were not present.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Resolved {
    pub indices: Vec<usize>,
    pub missing: Vec<String>,
}

fn normalize(token: &str) -> String {
    token.nfc().collect()
}

impl EmbeddingTable {
    /// Builds a table from a vocabulary and row-major data.
    pub fn new(vocab: Vec<String>, data: Vec<f64>, dim: usize) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::invalid("embedding table must have at least one row"));
        }
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if dim > MAX_DIM {
            return Err(Error::invalid(format!("embedding dimension {dim} exceeds the cap of {MAX_DIM}")));
        }
        if vocab.len() > MAX_ROWS {
            return Err(Error::invalid(format!(
                "{} rows exceed the cap of {MAX_ROWS}",
                vocab.len()
            )));
        }
        if data.len() != vocab.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: vocab.len() * dim,
                found: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding table"));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        let mut normalized = Vec::with_capacity(vocab.len());
        for (i, tok) in vocab.into_iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {tok:?}")));
            }
            let tok = normalize(&tok);
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {tok:?}")));
            }
            normalized.push(tok);
        }
        Ok(EmbeddingTable {
            vocab: normalized,
            index,
            data,
            dim,
        })
    }

    pub fn from_matrix(vocab: Vec<String>, matrix: &Matrix) -> Result<Self> {
        if vocab.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                found: vocab.len(),
            });
        }
        let (n, d) = matrix.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(matrix.row(i).iter());
        }
        Self::new(vocab, data, d)
    }

    /// Table whose tokens are `{prefix}{row}`.
    pub fn with_generated_vocab(prefix: &str, matrix: &Matrix) -> Result<Self> {
        let vocab = (0..matrix.nrows()).map(|i| format!("{prefix}{i}")).collect();
        Self::from_matrix(vocab, matrix)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, i: usize) -> &str {
        &self.vocab[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index
            .get(token)
            .or_else(|| self.index.get(&normalize(token)))
            .copied()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_row_slice(self.len(), self.dim, &self.data)
    }

    /// Looks up tokens, preserving order. Missing tokens are reported, never
    /// dropped silently; callers choose the policy.
    pub fn resolve_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Resolved {
        let mut out = Resolved::default();
        for tok in tokens {
            match self.index_of(tok.as_ref()) {
                Some(i) => out.indices.push(i),
                None => out.missing.push(tok.as_ref().to_string()),
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty())
            .peekable();

        let mut header: Option<(usize, usize)> = None;
        if let Some(&(_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if fields.len() == 2 {
                if let (Ok(n), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    header = Some((n, d));
                    lines.next();
                }
            }
        }

        let mut vocab = Vec::new();
        let mut data = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut dim = header.map(|(_, d)| d);
        let mut rows_read = 0usize;
        for (lineno, line) in lines {
            rows_read += 1;
            let mut fields = line.split_whitespace();
            let token = normalize(fields.next().expect("nonblank line has a field"));
            let start = data.len();
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("non-numeric field {f:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("non-finite value {f:?}")));
                }
                data.push(v);
            }
            let width = data.len() - start;
            match dim {
                None if width == 0 => return Err(parse_err(lineno, "row has no values".into())),
                None => dim = Some(width),
                Some(d) if d != width => {
                    return Err(parse_err(
                        lineno,
                        format!("expected {d} values, found {width}"),
                    ))
                }
                Some(_) => {}
            }
            if let Some(&first) = seen.get(&token) {
                warn!("{}:{lineno}: duplicate token {token:?} (keeping line {first})", path.display());
                data.truncate(start);
                continue;
            }
            seen.insert(token.clone(), lineno);
            vocab.push(token);
        }
        if vocab.is_empty() {
            return Err(parse_err(1, "no embeddings found".into()));
        }
        if let Some((n, _)) = header {
            if n != rows_read {
                warn!("{}: header announces {n} rows, read {rows_read}", path.display());
            }
        }
        Self::new(vocab, data, dim.expect("at least one row was read"))
    }

    /// Writes the word2vec text form with an `n d` header. Floats use the
    /// shortest representation that round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {}", self.len(), self.dim).unwrap();
        for (tok, row) in self.vocab.iter().zip(self.rows()) {
            out.push_str(tok);
            for v in row {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One token per line; blank lines and lines starting with `#` are skipped.
pub fn read_word_list(path: &Path) -> Result<Vec<String>> {
    Ok(parse_word_list(&read_text(path)?))
}

pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(normalize)
        .collect()
}

/// One group per line, whitespace-separated tokens. Unknown tokens are
/// dropped with a warning.
pub fn read_groups(path: &Path, table: &EmbeddingTable) -> Result<Vec<Vec<usize>>> {
    let text = read_text(path)?;
    let mut groups = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let resolved = table.resolve_tokens(&tokens);
        if !resolved.missing.is_empty() {
            warn!(
                "{}:{}: dropping unknown tokens {:?}",
                path.display(),
                lineno + 1,
                resolved.missing
            );
        }
        groups.push(resolved.indices);
    }
    Ok(groups)
}

pub fn write_groups(path: &Path, table: &EmbeddingTable, groups: &[Vec<usize>]) -> Result<()> {
    let mut out = String::new();
    for g in groups {
        let toks: Vec<&str> = g.iter().map(|&i| table.token(i)).collect();
        writeln!(out, "{}", toks.join(" ")).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Headerless `token1,token2` CSV. Rows with unknown tokens are dropped with
/// a warning.
pub fn read_pairs(path: &Path, table: &EmbeddingTable) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (lineno, fields) in csv_rows(&text) {
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        match (table.index_of(&fields[0]), table.index_of(&fields[1])) {
            (Some(a), Some(b)) => pairs.push((a, b)),
            _ => warn!("{}:{lineno}: dropping pair with unknown token", path.display()),
        }
    }
    Ok(pairs)
}

pub fn write_pairs(path: &Path, table: &EmbeddingTable, pairs: &[(usize, usize)]) -> Result<()> {
    let mut out = String::new();
    for &(a, b) in pairs {
        writeln!(out, "{},{}", table.token(a), table.token(b)).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// CSV with header `a,b,y`, `y ∈ {0, 1}`.
pub fn read_triplets(path: &Path, table: &EmbeddingTable) -> Result<ComparisonTriplets> {
    let text = read_text(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = csv_rows(&text);
    match rows.next() {
        Some((_, h)) if h.len() == 3 && h[0] == "a" && h[1] == "b" && h[2] == "y" => {}
        Some((line, _)) => return Err(parse_err(line, "expected header a,b,y".into())),
        None => return Err(parse_err(1, "empty triplets file".into())),
    }
    let mut triplets = Vec::new();
    for (lineno, fields) in rows {
        if fields.len() != 3 {
            return Err(parse_err(lineno, format!("expected 3 fields, found {}", fields.len())));
        }
        let comparable = match fields[2].as_str() {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(lineno, format!("label must be 0 or 1, found {other:?}"))),
        };
        match (table.index_of(&fields[0]), table.index_of(&fields[1])) {
            (Some(a), Some(b)) if a != b => triplets.push(Triplet::new(a, b, comparable)),
            (Some(_), Some(_)) => {
                return Err(parse_err(lineno, "a triplet must compare two different items".into()))
            }
            _ => warn!("{}:{lineno}: dropping triplet with unknown token", path.display()),
        }
    }
    ComparisonTriplets::new(triplets, table.len())
}

pub fn write_triplets(path: &Path, table: &EmbeddingTable, data: &ComparisonTriplets) -> Result<()> {
    let mut out = String::from("a,b,y\n");
    for t in data.iter() {
        writeln!(out, "{},{},{}", table.token(t.a), table.token(t.b), u8::from(t.comparable)).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// Minimal comma splitting; tokens never contain commas or whitespace.
fn csv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<String>)> + '_ {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() {
            return None;
        }
        Some((i + 1, line.split(',').map(|f| normalize(f.trim())).collect()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test.vec")
    }

    #[test]
    fn loads_plain_and_headed_files_identically() {
        let plain = EmbeddingTable::parse("a 1 0\nb 0 1\n", p()).unwrap();
        assert_eq!(plain.vocab(), &["a", "b"]);
        assert_eq!(plain.dim(), 2);
        assert_eq!(plain.row(1), &[0.0, 1.0]);
        let headed = EmbeddingTable::parse("2 2\na 1 0\nb 0 1\n", p()).unwrap();
        assert_eq!(plain, headed);
    }

    #[test]
    fn ragged_rows_name_the_line() {
        let err = EmbeddingTable::parse("a 1 0\nb 0 1 2\n", p()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_content() {
        assert!(EmbeddingTable::parse("", p()).is_err());
        assert!(EmbeddingTable::parse("a 1 x\n", p()).is_err());
        assert!(EmbeddingTable::parse("a\n", p()).is_err());
        assert!(EmbeddingTable::parse("a 1 nan\n", p()).is_err());
    }

    #[test]
    fn duplicate_tokens_keep_first() {
        let t = EmbeddingTable::parse("a 1 0\nb 0 1\na 5 5\n", p()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.row(t.index_of("a").unwrap()), &[1.0, 0.0]);
    }

    #[test]
    fn tokens_are_nfc_normalized_and_case_sensitive() {
        // "é" as e + combining acute.
        let t = EmbeddingTable::parse("caf\u{65}\u{301} 1\nCafe 2\ncafe 3\n", p()).unwrap();
        assert_eq!(t.index_of("caf\u{e9}"), Some(0));
        assert_eq!(t.index_of("caf\u{65}\u{301}"), Some(0));
        assert_eq!(t.index_of("Cafe"), Some(1));
        assert_eq!(t.index_of("cafe"), Some(2));
    }

    #[test]
    fn resolve_tokens_splits_faithfully() {
        let t = EmbeddingTable::parse("a 1\nb 2\nc 3\n", p()).unwrap();
        let all = t.resolve_tokens(&["c", "a"]);
        assert_eq!(all.indices, vec![2, 0]);
        assert!(all.missing.is_empty());
        let none = t.resolve_tokens(&["x", "y"]);
        assert!(none.indices.is_empty());
        assert_eq!(none.missing, vec!["x", "y"]);
        let mixed = t.resolve_tokens(&["b", "zz", "a"]);
        assert_eq!(mixed.indices, vec![1, 0]);
        assert_eq!(mixed.missing, vec!["zz"]);
    }

    #[test]
    fn word_lists_skip_comments() {
        let words = parse_word_list("# targets\nalice\n\n  bob \n#carol\n");
        assert_eq!(words, vec!["alice", "bob"]);
    }

    #[test]
    fn group_pair_and_triplet_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = EmbeddingTable::parse("a 1\nb 2\nc 3\nd 4\n", p()).unwrap();

        let groups = dir.path().join("groups.txt");
        fs::write(&groups, "a b nope\n\nc d\n").unwrap();
        assert_eq!(read_groups(&groups, &t).unwrap(), vec![vec![0, 1], vec![2, 3]]);

        let pairs = dir.path().join("pairs.csv");
        fs::write(&pairs, "a,b\nc,zzz\nd,a\n").unwrap();
        assert_eq!(read_pairs(&pairs, &t).unwrap(), vec![(0, 1), (3, 0)]);

        let trip = dir.path().join("t.csv");
        fs::write(&trip, "a,b,y\na,b,1\nc,d,0\n").unwrap();
        let data = read_triplets(&trip, &t).unwrap();
        assert_eq!(data.len(), 2);
        assert!(data.get(0).comparable && !data.get(1).comparable);

        fs::write(&trip, "a,b,y\na,b,2\n").unwrap();
        assert!(read_triplets(&trip, &t).is_err());
        fs::write(&trip, "x,y,z\na,b,1\n").unwrap();
        assert!(read_triplets(&trip, &t).is_err());
    }

    proptest! {
        #[test]
        fn save_then_load_is_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(-1e8f64..1e8, 3), 1..20)
        ) {
            let n = rows.len();
            let vocab = (0..n).map(|i| format!("w{i}")).collect();
            let data: Vec<f64> = rows.into_iter().flatten().collect();
            let table = EmbeddingTable::new(vocab, data, 3).unwrap();
            let back = EmbeddingTable::parse(&table.to_text(), p()).unwrap();
            prop_assert_eq!(back, table);
        }
    }
}
