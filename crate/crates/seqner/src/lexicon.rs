//! External entity lexicon and type embeddings.
//!
//! Each entity type carries a list of known phrases with frequencies. A
//! type's embedding is the frequency-weighted sum of its phrase
//! embeddings, where a phrase embeds as the mean of its token embeddings.
//! Because both steps are linear, the whole lookup collapses into one
//! `|T| x vocab` weight matrix applied to the shared token embedding
//! table, which lets the type table stay differentiable end to end.

use std::collections::HashMap;
use std::path::Path;

use crate::corpus::{Sentence, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LexiconEntry {
    pub phrase: Vec<String>,
    pub frequency: u64,
}

/// Per-type phrase lists; index = type id. Every type has at least one
/// entry and all frequencies are positive.
#[derive(Debug, Clone)]
pub struct TypeLexicon {
    pub entries: Vec<Vec<LexiconEntry>>,
}

/// How raw frequencies become mixture weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FrequencyWeighting {
    /// theta_i = f_i / sum f
    Linear,
    /// theta_i = ln(1 + f_i) / sum ln(1 + f)
    Log,
}

impl TypeLexicon {
    pub fn n_types(&self) -> usize {
        self.entries.len()
    }

    /// Normalized phrase weights for one type; they sum to 1.
    pub fn thetas(&self, type_id: usize, weighting: FrequencyWeighting) -> Vec<f64> {
        let raw: Vec<f64> = self.entries[type_id]
            .iter()
            .map(|e| match weighting {
                FrequencyWeighting::Linear => e.frequency as f64,
                FrequencyWeighting::Log => (1.0 + e.frequency as f64).ln(),
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// Loads a TSV lexicon: `type_name <TAB> phrase tokens <TAB> frequency`.
pub fn load_lexicon(path: impl AsRef<Path>, type_names: &[String]) -> Result<TypeLexicon> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_lexicon(&text, type_names, &path.display().to_string())
}

pub fn parse_lexicon(text: &str, type_names: &[String], origin: &str) -> Result<TypeLexicon> {
    let mut by_name: HashMap<&str, usize> = HashMap::new();
    for (i, name) in type_names.iter().enumerate() {
        by_name.insert(name.as_str(), i);
    }
    let mut entries: Vec<Vec<LexiconEntry>> = vec![Vec::new(); type_names.len()];
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected 3 tab-separated columns, got {}", cols.len()),
            ));
        }
        let type_id = *by_name.get(cols[0]).ok_or_else(|| {
            Error::parse(origin, lineno, format!("unknown type name '{}'", cols[0]))
        })?;
        let phrase: Vec<String> = cols[1].split_whitespace().map(str::to_string).collect();
        if phrase.is_empty() {
            return Err(Error::parse(origin, lineno, "empty phrase"));
        }
        let frequency: u64 = cols[2]
            .trim()
            .parse()
            .map_err(|e| Error::parse(origin, lineno, format!("bad frequency: {e}")))?;
        if frequency == 0 {
            return Err(Error::parse(origin, lineno, "frequency must be positive"));
        }
        entries[type_id].push(LexiconEntry { phrase, frequency });
    }
    for (t, list) in entries.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::InvalidData(format!(
                "type '{}' has no lexicon entries",
                type_names[t]
            )));
        }
    }
    Ok(TypeLexicon { entries })
}

pub fn lexicon_to_tsv(lex: &TypeLexicon, type_names: &[String]) -> String {
    let mut out = String::new();
    for (t, list) in lex.entries.iter().enumerate() {
        for e in list {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                type_names[t],
                e.phrase.join(" "),
                e.frequency
            ));
        }
    }
    out
}

/// Derives a lexicon from corpus annotations: each distinct mention
/// surface becomes a phrase with its occurrence count as frequency.
pub fn lexicon_from_corpus(corpus: &[Sentence], n_types: usize) -> Result<TypeLexicon> {
    let mut counts: Vec<HashMap<Vec<String>, u64>> = vec![HashMap::new(); n_types];
    for s in corpus {
        for m in &s.mentions {
            if m.type_id >= n_types {
                return Err(Error::InvalidData(format!(
                    "mention type {} out of range",
                    m.type_id
                )));
            }
            let surface: Vec<String> = m
                .token_positions()
                .iter()
                .map(|&p| s.tokens[p].clone())
                .collect();
            *counts[m.type_id].entry(surface).or_insert(0) += 1;
        }
    }
    let entries: Vec<Vec<LexiconEntry>> = counts
        .into_iter()
        .map(|m| {
            let mut list: Vec<LexiconEntry> = m
                .into_iter()
                .map(|(phrase, frequency)| LexiconEntry { phrase, frequency })
                .collect();
            list.sort_by(|a, b| a.phrase.cmp(&b.phrase));
            list
        })
        .collect();
    for (t, list) in entries.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::InvalidData(format!(
                "no mentions of type {t} in corpus; lexicon needs every type"
            )));
        }
    }
    Ok(TypeLexicon { entries })
}

/// Flattens lexicon + vocab into a `|T| x vocab_size` matrix W such that
/// `E_T = W · Embed`: W[t] mixes token rows with weight
/// `theta_phrase / phrase_len` summed over occurrences.
pub fn type_weight_matrix(
    lex: &TypeLexicon,
    vocab: &Vocab,
    weighting: FrequencyWeighting,
) -> Tensor {
    let n_types = lex.n_types();
    let v = vocab.len();
    let mut w = vec![0.0; n_types * v];
    for t in 0..n_types {
        let thetas = lex.thetas(t, weighting);
        for (entry, theta) in lex.entries[t].iter().zip(thetas) {
            let per_token = theta / entry.phrase.len() as f64;
            for tok in &entry.phrase {
                w[t * v + vocab.id(tok)] += per_token;
            }
        }
    }
    Tensor::new(vec![n_types, v], w).expect("finite weights")
}

/// Plain (non-graph) type embedding computation, used by tests as the
/// reference for the in-graph matmul path.
pub fn compute_type_embeddings(
    lex: &TypeLexicon,
    vocab: &Vocab,
    token_embed: &Tensor,
    weighting: FrequencyWeighting,
) -> Tensor {
    let d = token_embed.shape[1];
    let w = type_weight_matrix(lex, vocab, weighting);
    let data = crate::graph::matmul_raw(&w.data, &token_embed.data, lex.n_types(), vocab.len(), d);
    Tensor::new(vec![lex.n_types(), d], data).expect("finite embedding")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["location".into(), "person".into()]
    }

    #[test]
    fn parse_single_line() {
        let lex = parse_lexicon(
            "location\tBeijing\t3\nperson\tAda\t1\n",
            &names(),
            "test",
        )
        .unwrap();
        assert_eq!(lex.entries[0].len(), 1);
        assert_eq!(lex.entries[0][0].phrase, vec!["Beijing"]);
        assert_eq!(lex.entries[0][0].frequency, 3);
    }

    #[test]
    fn parse_location_set() {
        let text = "location\tBeijing\t5\nlocation\tAthens\t2\nlocation\tLondon\t2\nlocation\tNew York\t1\nperson\tAda\t1\n";
        let lex = parse_lexicon(text, &names(), "test").unwrap();
        assert_eq!(lex.entries[0].len(), 4);
        assert_eq!(lex.entries[0][3].phrase, vec!["New", "York"]);
        let thetas = lex.thetas(0, FrequencyWeighting::Linear);
        assert!((thetas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((thetas[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_type_and_zero_frequency_rejected_with_line() {
        let err = parse_lexicon("city\tParis\t1\nperson\tAda\t1\n", &names(), "lex")
            .unwrap_err()
            .to_string();
        assert!(err.contains("lex:1"), "{err}");
        let err = parse_lexicon(
            "location\tParis\t0\nperson\tAda\t1\n",
            &names(),
            "lex",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("lex:1"), "{err}");
    }

    #[test]
    fn empty_lexicon_rejected() {
        assert!(parse_lexicon("", &names(), "lex").is_err());
    }

    #[test]
    fn theta_weighted_mixture() {
        // Two entries with freqs 3 and 1: E_t = 0.75 E1 + 0.25 E2.
        let lex = parse_lexicon(
            "location\ta\t3\nlocation\tb\t1\nperson\ta\t1\n",
            &names(),
            "test",
        )
        .unwrap();
        let vocab = Vocab::from_tokens(["a".to_string(), "b".to_string()]);
        // Embedding rows: pad, unk, a, b.
        let embed = Tensor::new(
            vec![4, 2],
            vec![0.0, 0.0, 0.0, 0.0, 2.0, 4.0, -2.0, 8.0],
        )
        .unwrap();
        let et = compute_type_embeddings(&lex, &vocab, &embed, FrequencyWeighting::Linear);
        assert_eq!(et.shape, vec![2, 2]);
        // 0.75*[2,4] + 0.25*[-2,8] = [1, 5]
        assert!((et.data[0] - 1.0).abs() < 1e-12);
        assert!((et.data[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn linear_in_embedding_table() {
        let lex = parse_lexicon(
            "location\ta b\t2\nlocation\tb\t1\nperson\ta\t4\n",
            &names(),
            "test",
        )
        .unwrap();
        let vocab = Vocab::from_tokens(["a".to_string(), "b".to_string()]);
        let embed = Tensor::new(
            vec![4, 2],
            vec![0.1, 0.2, 0.3, 0.4, 1.0, -1.0, 2.0, 0.5],
        )
        .unwrap();
        let scaled = Tensor::new(
            vec![4, 2],
            embed.data.iter().map(|v| v * 3.0).collect(),
        )
        .unwrap();
        let e1 = compute_type_embeddings(&lex, &vocab, &embed, FrequencyWeighting::Linear);
        let e3 = compute_type_embeddings(&lex, &vocab, &scaled, FrequencyWeighting::Linear);
        for (a, b) in e1.data.iter().zip(&e3.data) {
            assert!((a * 3.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_embeddings_give_zero_types() {
        let lex = parse_lexicon("location\ta\t1\nperson\tb\t1\n", &names(), "test").unwrap();
        let vocab = Vocab::from_tokens(["a".to_string(), "b".to_string()]);
        let embed = Tensor::zeros(vec![4, 3]);
        let et = compute_type_embeddings(&lex, &vocab, &embed, FrequencyWeighting::Linear);
        assert!(et.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corpus_lexicon_counts_match() {
        let s = |tokens: &[&str], m: Vec<EntityMentionSpec>| Sentence {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            mentions: m
                .into_iter()
                .map(|(f, t)| crate::corpus::EntityMention::new(f, t).unwrap())
                .collect(),
        };
        type EntityMentionSpec = (Vec<(usize, usize)>, usize);
        let corpus = vec![
            s(&["a", "b"], vec![(vec![(0, 1)], 0)]),
            s(&["a", "b"], vec![(vec![(0, 1)], 0)]),
            s(&["c"], vec![(vec![(0, 0)], 1)]),
        ];
        let lex = lexicon_from_corpus(&corpus, 2).unwrap();
        assert_eq!(lex.entries[0].len(), 1);
        assert_eq!(lex.entries[0][0].frequency, 2);
        assert_eq!(lex.entries[1][0].frequency, 1);
    }
}
