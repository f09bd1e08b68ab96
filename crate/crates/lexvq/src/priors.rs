//! Ingestion of pretrained word embeddings and a part-of-speech lexicon,
//! and the filtering step that turns them into adjective/noun prior
//! codebooks. The embedding vectors are copied verbatim and never modified
//! downstream; they act as frozen priors.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::read_text;
use crate::tensor::Tensor;

/// Part-of-speech tags the pipeline distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PosTag {
    Adj,
    Noun,
    Other,
}

/// A word-embedding table: one row per word, all rows the same dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    words: Vec<String>,
    vectors: Tensor,
    dim: usize,
}

impl EmbeddingTable {
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Map from word to the set of tags it carries.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    tags: HashMap<String, Vec<PosTag>>,
}

impl PosLexicon {
    pub fn tags(&self, word: &str) -> &[PosTag] {
        self.tags.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_tag(&self, word: &str, tag: PosTag) -> bool {
        self.tags(word).contains(&tag)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// The filtered adjective and noun prior codebooks. Rows are exact copies of
/// embedding-table rows.
#[derive(Debug, Clone)]
pub struct PlmCodebooks {
    pub adj_words: Vec<String>,
    pub r_adj: Tensor,
    pub noun_words: Vec<String>,
    pub r_noun: Tensor,
}

impl PlmCodebooks {
    pub fn k_adj(&self) -> usize {
        self.adj_words.len()
    }

    pub fn k_noun(&self) -> usize {
        self.noun_words.len()
    }

    pub fn dim(&self) -> usize {
        self.r_adj.shape()[1]
    }

    /// Index of a word in the adjective codebook.
    pub fn adj_index(&self, word: &str) -> Option<usize> {
        self.adj_words.iter().position(|w| w == word)
    }

    pub fn noun_index(&self, word: &str) -> Option<usize> {
        self.noun_words.iter().position(|w| w == word)
    }

    /// Node features for the transfer network: adjective rows stacked above
    /// noun rows, matching the graph module's node-ordering contract.
    pub fn node_features(&self) -> Tensor {
        Tensor::vstack(&[&self.r_adj, &self.r_noun]).expect("codebooks share the embedding dim")
    }
}

/// Parses a GloVe-style text table: one `word v0 v1 ...` entry per line.
/// Words are lowercased; dimension is fixed by the first line.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = read_text(path)?;
    parse_embeddings(&text, &path.display().to_string())
}

pub fn parse_embeddings(text: &str, source: &str) -> Result<EmbeddingTable> {
    let mut words = Vec::new();
    let mut seen = HashMap::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let word = fields
            .next()
            .expect("non-empty line has a first field")
            .to_lowercase();
        let mut vector = Vec::new();
        for field in fields {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(source, lineno, format!("non-numeric field '{field}'"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(source, lineno, "non-finite embedding value"));
            }
            vector.push(v);
        }
        match dim {
            None => {
                if vector.is_empty() {
                    return Err(Error::parse(source, lineno, "entry has no vector values"));
                }
                dim = Some(vector.len());
            }
            Some(d) if d != vector.len() => {
                return Err(Error::parse(
                    source,
                    lineno,
                    format!("expected {d} values, found {}", vector.len()),
                ));
            }
            _ => {}
        }
        if let Some(prev) = seen.insert(word.clone(), lineno) {
            return Err(Error::parse(
                source,
                lineno,
                format!("duplicate word '{word}' (first seen on line {prev})"),
            ));
        }
        words.push(word);
        data.extend_from_slice(&vector);
    }
    let dim = dim.ok_or_else(|| Error::parse(source, 0, "no entries"))?;
    let rows = words.len();
    Ok(EmbeddingTable {
        words,
        vectors: Tensor::new(data, &[rows, dim])?,
        dim,
    })
}

/// Parses a lexicon: `word<TAB>tag,tag` per line, tags drawn from
/// a/adj, n/noun, other. Repeated lines for a word union their tags.
pub fn load_lexicon(path: &Path) -> Result<PosLexicon> {
    let text = read_text(path)?;
    parse_lexicon(&text, &path.display().to_string())
}

pub fn parse_lexicon(text: &str, source: &str) -> Result<PosLexicon> {
    let mut tags: HashMap<String, Vec<PosTag>> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let (word, tag_list) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source, lineno, "expected 'word<TAB>tags'"))?;
        let word = word.trim().to_lowercase();
        if word.is_empty() {
            return Err(Error::parse(source, lineno, "empty word"));
        }
        let entry = tags.entry(word).or_default();
        for tag_token in tag_list.split(',') {
            let tag = match tag_token.trim().to_lowercase().as_str() {
                "a" | "adj" => PosTag::Adj,
                "n" | "noun" => PosTag::Noun,
                "other" => PosTag::Other,
                unknown => {
                    return Err(Error::parse(
                        source,
                        lineno,
                        format!("unknown tag '{unknown}'"),
                    ))
                }
            };
            if !entry.contains(&tag) {
                entry.push(tag);
            }
        }
        if entry.is_empty() {
            return Err(Error::parse(source, lineno, "entry has no tags"));
        }
    }
    Ok(PosLexicon { tags })
}

/// Filters the table down to words tagged ADJ / NOUN in the lexicon,
/// in table order, truncated at the caps. Words carrying both tags join
/// both codebooks.
pub fn build_plm_codebooks(
    table: &EmbeddingTable,
    lexicon: &PosLexicon,
    k_adj_max: usize,
    k_noun_max: usize,
) -> Result<PlmCodebooks> {
    if k_adj_max == 0 || k_noun_max == 0 {
        return Err(Error::Invalid("codebook caps must be positive".into()));
    }
    let mut adj_words = Vec::new();
    let mut adj_rows: Vec<&[f64]> = Vec::new();
    let mut noun_words = Vec::new();
    let mut noun_rows: Vec<&[f64]> = Vec::new();
    for (i, word) in table.words.iter().enumerate() {
        if adj_words.len() < k_adj_max && lexicon.has_tag(word, PosTag::Adj) {
            adj_words.push(word.clone());
            adj_rows.push(table.vectors.row(i));
        }
        if noun_words.len() < k_noun_max && lexicon.has_tag(word, PosTag::Noun) {
            noun_words.push(word.clone());
            noun_rows.push(table.vectors.row(i));
        }
        if adj_words.len() == k_adj_max && noun_words.len() == k_noun_max {
            break;
        }
    }
    if adj_words.is_empty() {
        return Err(Error::Invalid(
            "empty intersection: no table word is tagged as an adjective".into(),
        ));
    }
    if noun_words.is_empty() {
        return Err(Error::Invalid(
            "empty intersection: no table word is tagged as a noun".into(),
        ));
    }
    let dim = table.dim;
    let flatten = |rows: &[&[f64]]| -> Vec<f64> { rows.concat() };
    Ok(PlmCodebooks {
        r_adj: Tensor::new(flatten(&adj_rows), &[adj_words.len(), dim])?,
        adj_words,
        r_noun: Tensor::new(flatten(&noun_rows), &[noun_words.len(), dim])?,
        noun_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_direct_parse() {
        let t = parse_embeddings("red 1.0 0.0\nblue 0.0 1.0", "mem").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.words(), &["red", "blue"]);
        assert_eq!(t.vectors().row(1), &[0.0, 1.0]);
    }

    #[test]
    fn embeddings_empty_file_is_an_error() {
        let err = parse_embeddings("", "mem").unwrap_err();
        assert!(err.to_string().contains("no entries"), "{err}");
    }

    #[test]
    fn embeddings_ragged_row_names_line() {
        let err = parse_embeddings("red 1.0 0.0\nblue 0.0 1.0 2.0", "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mem:2"), "{msg}");
    }

    #[test]
    fn embeddings_duplicate_and_non_numeric_report_lines() {
        let err = parse_embeddings("red 1.0\nred 2.0", "mem").unwrap_err();
        assert!(err.to_string().contains("duplicate word 'red'"), "{err}");

        let err = parse_embeddings("red 1.0\nblue x", "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mem:2") && msg.contains("non-numeric"), "{msg}");
    }

    #[test]
    fn lexicon_multi_tag_and_single_tag() {
        let lex = parse_lexicon("orange\ta,n\nwheel\tn", "mem").unwrap();
        assert!(lex.has_tag("orange", PosTag::Adj));
        assert!(lex.has_tag("orange", PosTag::Noun));
        assert_eq!(lex.tags("wheel"), &[PosTag::Noun]);
    }

    #[test]
    fn lexicon_unknown_tag_rejected() {
        let err = parse_lexicon("fast\tx", "mem").unwrap_err();
        assert!(err.to_string().contains("unknown tag 'x'"), "{err}");
    }

    fn demo_table_and_lexicon() -> (EmbeddingTable, PosLexicon) {
        let table =
            parse_embeddings("red 1.0 0.0\nwheel 0.0 1.0\norange 0.5 0.5", "mem").unwrap();
        let lex = parse_lexicon("red\ta\nwheel\tn\norange\ta,n", "mem").unwrap();
        (table, lex)
    }

    #[test]
    fn filter_by_tag_with_dual_membership() {
        let (table, lex) = demo_table_and_lexicon();
        let cb = build_plm_codebooks(&table, &lex, 10, 10).unwrap();
        assert_eq!(cb.adj_words, vec!["red", "orange"]);
        assert_eq!(cb.noun_words, vec!["wheel", "orange"]);
        // rows copied bit-exactly from the table
        assert_eq!(cb.r_adj.row(1), table.vectors.row(2));
        assert_eq!(cb.r_noun.row(0), table.vectors.row(1));
    }

    #[test]
    fn caps_truncate_in_table_order() {
        let (table, lex) = demo_table_and_lexicon();
        let cb = build_plm_codebooks(&table, &lex, 1, 1).unwrap();
        assert_eq!(cb.adj_words, vec!["red"]);
        assert_eq!(cb.noun_words, vec!["wheel"]);
    }

    #[test]
    fn empty_intersection_is_an_error() {
        let table = parse_embeddings("red 1.0\nwheel 0.0", "mem").unwrap();
        let lex = parse_lexicon("red\tother\nwheel\tother", "mem").unwrap();
        let err = build_plm_codebooks(&table, &lex, 4, 4).unwrap_err();
        assert!(err.to_string().contains("empty intersection"), "{err}");
    }

    #[test]
    fn node_features_stack_adj_above_noun() {
        let (table, lex) = demo_table_and_lexicon();
        let cb = build_plm_codebooks(&table, &lex, 10, 10).unwrap();
        let h0 = cb.node_features();
        assert_eq!(h0.shape(), &[4, 2]);
        assert_eq!(h0.row(0), cb.r_adj.row(0));
        assert_eq!(h0.row(2), cb.r_noun.row(0));
    }
}
