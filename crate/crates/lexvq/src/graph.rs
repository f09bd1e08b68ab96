//! The bipartite adjective-modifies-noun graph and its symmetric-normalized
//! propagation matrix.
//!
//! Node ordering contract: adjective nodes occupy indices `0..k_adj`, noun
//! nodes `k_adj..k_adj+k_noun`. The transfer module slices its outputs by
//! this ordering.

use std::collections::BTreeSet;
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::io::read_text;
use crate::priors::{PlmCodebooks, PosLexicon, PosTag};
use crate::tensor::SparseMat;

/// Binary bipartite adjacency: edge `(i, j)` means adjective `i` modifies
/// noun `j`. Edges are a set; duplicates collapse.
#[derive(Debug, Clone)]
pub struct ModifyingGraph {
    k_adj: usize,
    k_noun: usize,
    edges: BTreeSet<(usize, usize)>,
}

/// Counters produced while building a graph; an empty corpus is flagged
/// rather than treated as an error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphBuildStats {
    pub empty_input: bool,
    pub skipped_unknown: usize,
}

impl ModifyingGraph {
    pub fn new(k_adj: usize, k_noun: usize) -> Self {
        ModifyingGraph {
            k_adj,
            k_noun,
            edges: BTreeSet::new(),
        }
    }

    pub fn k_adj(&self) -> usize {
        self.k_adj
    }

    pub fn k_noun(&self) -> usize {
        self.k_noun
    }

    pub fn node_count(&self) -> usize {
        self.k_adj + self.k_noun
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, adj: usize, noun: usize) -> bool {
        self.edges.contains(&(adj, noun))
    }

    pub fn insert_edge(&mut self, adj: usize, noun: usize) -> Result<()> {
        if adj >= self.k_adj || noun >= self.k_noun {
            return Err(Error::Invalid(format!(
                "edge ({adj}, {noun}) out of range for {}x{} graph",
                self.k_adj, self.k_noun
            )));
        }
        self.edges.insert((adj, noun));
        Ok(())
    }

    /// Edges in deterministic (adj, noun) index order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// TSV export, deterministically sorted by edge index pair.
    pub fn to_tsv(&self, cb: &PlmCodebooks) -> String {
        let mut out = String::new();
        for &(i, j) in &self.edges {
            out.push_str(&cb.adj_words[i]);
            out.push('\t');
            out.push_str(&cb.noun_words[j]);
            out.push('\n');
        }
        out
    }
}

/// Scans a whitespace-separated token stream and emits an edge whenever an
/// adjective from the codebook is immediately followed by a noun from the
/// codebook (adjacent-bigram rule).
pub fn build_from_corpus(
    path: &Path,
    lexicon: &PosLexicon,
    cb: &PlmCodebooks,
) -> Result<(ModifyingGraph, GraphBuildStats)> {
    let text = read_text(path)?;
    Ok(build_from_corpus_text(&text, lexicon, cb))
}

pub fn build_from_corpus_text(
    text: &str,
    lexicon: &PosLexicon,
    cb: &PlmCodebooks,
) -> (ModifyingGraph, GraphBuildStats) {
    let mut graph = ModifyingGraph::new(cb.k_adj(), cb.k_noun());
    let mut stats = GraphBuildStats::default();
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect();
    if tokens.is_empty() {
        stats.empty_input = true;
        return (graph, stats);
    }
    for pair in tokens.windows(2) {
        let (first, second) = (&pair[0], &pair[1]);
        if !lexicon.has_tag(first, PosTag::Adj) || !lexicon.has_tag(second, PosTag::Noun) {
            continue;
        }
        if let (Some(i), Some(j)) = (cb.adj_index(first), cb.noun_index(second)) {
            graph.edges.insert((i, j));
        }
    }
    (graph, stats)
}

/// Loads a precomputed edge list: one `adjword<TAB>nounword` per line.
/// Lines naming words outside the codebooks are skipped and counted.
pub fn load_edge_list(path: &Path, cb: &PlmCodebooks) -> Result<(ModifyingGraph, GraphBuildStats)> {
    let text = read_text(path)?;
    parse_edge_list(&text, &path.display().to_string(), cb)
}

pub fn parse_edge_list(
    text: &str,
    source: &str,
    cb: &PlmCodebooks,
) -> Result<(ModifyingGraph, GraphBuildStats)> {
    let mut graph = ModifyingGraph::new(cb.k_adj(), cb.k_noun());
    let mut stats = GraphBuildStats::default();
    let mut saw_line = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        saw_line = true;
        let (adj, noun) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source, lineno + 1, "expected 'adj<TAB>noun'"))?;
        let adj = adj.trim().to_lowercase();
        let noun = noun.trim().to_lowercase();
        if adj.is_empty() || noun.is_empty() {
            return Err(Error::parse(source, lineno + 1, "empty word in edge"));
        }
        match (cb.adj_index(&adj), cb.noun_index(&noun)) {
            (Some(i), Some(j)) => {
                graph.edges.insert((i, j));
            }
            _ => stats.skipped_unknown += 1,
        }
    }
    stats.empty_input = !saw_line;
    Ok((graph, stats))
}

/// The symmetric-normalized propagation operator over the bipartite graph
/// with self-loops: `D^{-1/2} (A_sym + I) D^{-1/2}`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    k_adj: usize,
    matrix: Rc<SparseMat>,
}

impl NormalizedAdjacency {
    pub fn size(&self) -> usize {
        self.matrix.size()
    }

    pub fn k_adj(&self) -> usize {
        self.k_adj
    }

    pub fn matrix(&self) -> &Rc<SparseMat> {
        &self.matrix
    }
}

/// Builds the propagation matrix. Isolated nodes keep a unit self-loop, so
/// their rows equal standard basis vectors and features survive unchanged.
pub fn normalize(graph: &ModifyingGraph) -> NormalizedAdjacency {
    let n = graph.node_count();
    // Degree in (A_sym + I): 1 for the self-loop plus bipartite neighbors.
    let mut degree = vec![1.0f64; n];
    for &(i, j) in &graph.edges {
        degree[i] += 1.0;
        degree[adj_offset(graph, j)] += 1.0;
    }
    // 1/sqrt(du*dv) rather than (1/sqrt(du))*(1/sqrt(dv)): the product form
    // is exact whenever du*dv is a perfect square (diagonals always, the
    // 2x2 single-edge case, ...), which the normalization contract pins.
    let weight = |u: usize, v: usize| 1.0 / (degree[u] * degree[v]).sqrt();

    let mut m = SparseMat::new(n);
    for u in 0..n {
        m.push(u, u, weight(u, u));
    }
    for &(i, j) in &graph.edges {
        let u = i;
        let v = adj_offset(graph, j);
        let w = weight(u, v);
        m.push(u, v, w);
        m.push(v, u, w);
    }
    NormalizedAdjacency {
        k_adj: graph.k_adj,
        matrix: Rc::new(m),
    }
}

fn adj_offset(graph: &ModifyingGraph, noun: usize) -> usize {
    graph.k_adj + noun
}
