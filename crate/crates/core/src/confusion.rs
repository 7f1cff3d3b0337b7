//! Confusion sets and the two character similarity graphs built from them.
//!
//! The canonical on-disk format is UTF-8 TSV, one pair per line:
//!
//! ```text
//! # char <TAB> category <TAB> candidate
//! ```
//!
//! Categories follow the SIGHAN 2013 confusion set: `1` similar shape,
//! `2` same pronunciation and tone, `3` same pronunciation with a different
//! tone, `4` similar pronunciation and same tone, `5` similar pronunciation
//! with a different tone. Category 1 feeds the shape graph; categories 2-5
//! are merged into the pronunciation graph.
//!
//! The raw SIGHAN 2013 distribution ships as two files,
//! `SimilarShape.txt` (`char,candidates` per line) and
//! `SimilarPronunciation.txt` (a header row, then `char` followed by four
//! tab-separated candidate strings in category order 2..5).
//! [`ConfusionSet::from_sighan13`] converts that pair into canonical form.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matrix::Csr;

pub const SHAPE_CATEGORY: u8 = 1;

/// One directed `(char, category, candidate)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfusionEntry {
    pub ch: char,
    pub category: u8,
    pub candidate: char,
}

/// Deduplicated confusion pairs plus a dense node index over every
/// character that appears on either side of a pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfusionSet {
    entries: Vec<ConfusionEntry>,
    chars: Vec<char>,
    index: HashMap<char, usize>,
    candidates: HashMap<char, Vec<char>>,
}

impl ConfusionSet {
    /// Parses the canonical TSV format. Blank lines and `#` comments are
    /// skipped; duplicate triples are dropped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            entries.push(parse_line(line, lineno + 1)?);
        }
        Self::from_entries(entries)
    }

    /// Builds from triples. Node ids are assigned in first-appearance order
    /// (char before candidate within each entry).
    pub fn from_entries(entries: impl IntoIterator<Item = ConfusionEntry>) -> Result<Self> {
        let mut cs = ConfusionSet::default();
        let mut seen = HashSet::new();
        for e in entries {
            if !(1..=5).contains(&e.category) {
                return Err(Error::Config(format!(
                    "category {} outside 1..5 for pair {}/{}",
                    e.category, e.ch, e.candidate
                )));
            }
            if !seen.insert(e) {
                continue;
            }
            cs.intern(e.ch);
            cs.intern(e.candidate);
            if e.ch != e.candidate {
                let list = cs.candidates.entry(e.ch).or_default();
                if !list.contains(&e.candidate) {
                    list.push(e.candidate);
                }
            }
            cs.entries.push(e);
        }
        Ok(cs)
    }

    /// Converts the two raw SIGHAN 2013 files into a confusion set.
    pub fn from_sighan13(shape_text: &str, pron_text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in shape_text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line.split_once([',', '\t']).ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: "expected `char,candidates`".into(),
            })?;
            let ch = single_char(head.trim(), lineno + 1)?;
            for cand in rest.chars().filter(|c| !c.is_whitespace() && *c != ',') {
                entries.push(ConfusionEntry {
                    ch,
                    category: SHAPE_CATEGORY,
                    candidate: cand,
                });
            }
        }
        for (lineno, line) in pron_text.lines().enumerate() {
            let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            let head = fields[0].trim();
            if head.is_empty() {
                continue;
            }
            // header row ("中文字 ...") and anything else that is not a single character
            if head.chars().count() != 1 {
                if lineno == 0 {
                    continue;
                }
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected a single character, got `{head}`"),
                });
            }
            let ch = head.chars().next().unwrap();
            for (k, field) in fields.iter().skip(1).take(4).enumerate() {
                for cand in field.chars().filter(|c| !c.is_whitespace() && *c != ',') {
                    entries.push(ConfusionEntry {
                        ch,
                        category: k as u8 + 2,
                        candidate: cand,
                    });
                }
            }
        }
        Self::from_entries(entries)
    }

    fn intern(&mut self, c: char) {
        if !self.index.contains_key(&c) {
            self.index.insert(c, self.chars.len());
            self.chars.push(c);
        }
    }

    pub fn entries(&self) -> &[ConfusionEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of graph nodes N.
    pub fn n_nodes(&self) -> usize {
        self.chars.len()
    }

    /// Node id to character.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn node_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// The distinct candidates listed for `c` across all categories, in
    /// file order. Self-pairs are excluded.
    pub fn candidates(&self, c: char) -> &[char] {
        self.candidates.get(&c).map_or(&[], Vec::as_slice)
    }

    /// Serialises back to canonical TSV.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.ch, e.category, e.candidate);
        }
        s
    }
}

fn single_char(field: &str, line: usize) -> Result<char> {
    let mut it = field.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(Error::Parse {
            line,
            msg: format!("expected exactly one codepoint, got `{field}`"),
        }),
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<ConfusionEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
        });
    }
    let ch = single_char(fields[0], lineno)?;
    let category: u8 = fields[1].trim().parse().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("category `{}` is not an integer", fields[1]),
    })?;
    if !(1..=5).contains(&category) {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("category {category} outside 1..5"),
        });
    }
    let candidate = single_char(fields[2], lineno)?;
    Ok(ConfusionEntry {
        ch,
        category,
        candidate,
    })
}

/// Binary adjacency and its normalised form over the shared node space.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    n_nodes: usize,
    adjacency: Csr<f64>,
    normalized: Csr<f64>,
}

impl SimilarityGraph {
    /// Panics if `adjacency` is not square.
    pub fn from_adjacency(adjacency: Csr<f64>) -> Self {
        assert_eq!(adjacency.rows(), adjacency.cols(), "adjacency must be square");
        let normalized = normalize_adjacency(&adjacency);
        Self {
            n_nodes: adjacency.rows(),
            adjacency,
            normalized,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Csr<f64> {
        &self.adjacency
    }

    /// Â = D̃^-1/2 (A + I) D̃^-1/2.
    pub fn normalized(&self) -> &Csr<f64> {
        &self.normalized
    }

    /// Nonzeros of the symmetric adjacency (each undirected edge counted twice).
    pub fn directed_nonzeros(&self) -> usize {
        self.adjacency.nnz()
    }

    pub fn undirected_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Nodes with at least one edge in this graph.
    pub fn connected_characters(&self) -> usize {
        (0..self.n_nodes)
            .filter(|&r| self.adjacency.row_iter(r).next().is_some())
            .count()
    }
}

/// Builds the pronunciation and shape graphs. Self-pairs are ignored.
pub fn build_graphs(cs: &ConfusionSet) -> (SimilarityGraph, SimilarityGraph) {
    let n = cs.n_nodes();
    let mut pron = HashSet::new();
    let mut shape = HashSet::new();
    for e in cs.entries() {
        let (a, b) = (cs.node_of(e.ch).unwrap(), cs.node_of(e.candidate).unwrap());
        if a == b {
            continue;
        }
        let set = if e.category == SHAPE_CATEGORY {
            &mut shape
        } else {
            &mut pron
        };
        set.insert((a, b));
        set.insert((b, a));
    }
    let to_graph = |set: HashSet<(usize, usize)>| {
        let trip = set.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
        SimilarityGraph::from_adjacency(Csr::from_triplets(n, n, trip))
    };
    (to_graph(pron), to_graph(shape))
}

/// Symmetric degree normalisation with self-loops. The input must be a
/// symmetric binary matrix with a zero diagonal.
pub fn normalize_adjacency(adjacency: &Csr<f64>) -> Csr<f64> {
    let n = adjacency.rows();
    let degree: Vec<f64> = (0..n)
        .map(|r| 1.0 + adjacency.row_iter(r).map(|(_, v)| v).sum::<f64>())
        .collect();
    let mut trip = Vec::with_capacity(adjacency.nnz() + n);
    for r in 0..n {
        trip.push((r, r, 1.0 / degree[r]));
        for (c, v) in adjacency.row_iter(r) {
            if v != 0.0 && c != r {
                trip.push((r, c, 1.0 / (degree[r] * degree[c]).sqrt()));
            }
        }
    }
    Csr::from_triplets(n, n, trip)
}

/// Maps each vocabulary position to its confusion-set node, if any.
pub fn vocab_index_map(cs: &ConfusionSet, vocab: &[char]) -> Vec<Option<usize>> {
    vocab.iter().map(|&c| cs.node_of(c)).collect()
}

/// Summary counts for one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphCounts {
    pub characters: usize,
    pub directed_nonzeros: usize,
    pub undirected_edges: usize,
    /// Raw (deduplicated, directed) confusion entries feeding the graph.
    pub raw_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub pronunciation: GraphCounts,
    pub shape: GraphCounts,
    /// Entry count for categories 1..=5.
    pub per_category: [usize; 5],
}

pub fn graph_stats(cs: &ConfusionSet) -> GraphStats {
    let (pron, shape) = build_graphs(cs);
    let mut per_category = [0usize; 5];
    for e in cs.entries() {
        per_category[e.category as usize - 1] += 1;
    }
    let counts = |g: &SimilarityGraph, raw: usize| GraphCounts {
        characters: g.connected_characters(),
        directed_nonzeros: g.directed_nonzeros(),
        undirected_edges: g.undirected_edges(),
        raw_entries: raw,
    };
    GraphStats {
        n_nodes: cs.n_nodes(),
        pronunciation: counts(&pron, per_category[1..].iter().sum()),
        shape: counts(&shape, per_category[0]),
        per_category,
    }
}

impl GraphStats {
    /// Tab-separated report, one `key value` row per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_nodes\t{}", self.n_nodes);
        for (name, g) in [("pron", &self.pronunciation), ("shape", &self.shape)] {
            let _ = writeln!(s, "{name}.characters\t{}", g.characters);
            let _ = writeln!(s, "{name}.edges\t{}", g.undirected_edges);
            let _ = writeln!(s, "{name}.directed_nonzeros\t{}", g.directed_nonzeros);
            let _ = writeln!(s, "{name}.raw_entries\t{}", g.raw_entries);
        }
        for (k, c) in self.per_category.iter().enumerate() {
            let _ = writeln!(s, "category{}\t{c}", k + 1);
        }
        s
    }
}
