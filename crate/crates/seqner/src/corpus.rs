//! Sentences, entity mentions, vocabulary, and pointer-target encoding.
//!
//! One data model covers flat, nested, and discontinuous NER: a mention is
//! an ordered list of inclusive `[start, end]` token fragments plus a type
//! id. Mentions of different entities may overlap or nest freely.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entity mention. Two or more fragments make it discontinuous.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityMention {
    /// Inclusive `[start, end]` token ranges, sorted, non-overlapping,
    /// non-adjacent (adjacent ranges are merged on construction, since the
    /// pointer encoding cannot distinguish them from one range).
    pub fragments: Vec<(usize, usize)>,
    pub type_id: usize,
}

impl EntityMention {
    pub fn new(fragments: Vec<(usize, usize)>, type_id: usize) -> Result<Self> {
        if fragments.is_empty() {
            return Err(Error::InvalidData("mention with no fragments".into()));
        }
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(fragments.len());
        for &(s, e) in &fragments {
            if s > e {
                return Err(Error::InvalidData(format!(
                    "fragment start {s} > end {e}"
                )));
            }
            if let Some(last) = merged.last_mut() {
                if s <= last.1 {
                    return Err(Error::InvalidData(format!(
                        "fragments out of order or overlapping: {:?}",
                        fragments
                    )));
                }
                if s == last.1 + 1 {
                    last.1 = e;
                    continue;
                }
            }
            merged.push((s, e));
        }
        Ok(EntityMention {
            fragments: merged,
            type_id,
        })
    }

    pub fn is_discontinuous(&self) -> bool {
        self.fragments.len() > 1
    }

    /// All token indices covered, in order.
    pub fn token_positions(&self) -> Vec<usize> {
        self.fragments
            .iter()
            .flat_map(|&(s, e)| s..=e)
            .collect()
    }

    pub fn first_token(&self) -> usize {
        self.fragments[0].0
    }

    pub fn last_token(&self) -> usize {
        self.fragments[self.fragments.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub mentions: Vec<EntityMention>,
}

impl Sentence {
    pub fn validate(&self, n_types: Option<usize>) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidData("empty token list".into()));
        }
        for m in &self.mentions {
            if m.last_token() >= self.tokens.len() {
                return Err(Error::InvalidData(format!(
                    "fragment index {} out of range for {} tokens",
                    m.last_token(),
                    self.tokens.len()
                )));
            }
            if let Some(t) = n_types {
                if m.type_id >= t {
                    return Err(Error::InvalidData(format!(
                        "type id {} out of range for {t} types",
                        m.type_id
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── corpus file I/O ─────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct MentionJson {
    frags: Vec<[usize; 2]>,
    #[serde(rename = "type")]
    type_id: usize,
}

#[derive(Serialize, Deserialize)]
struct SentenceJson {
    tokens: Vec<String>,
    mentions: Vec<MentionJson>,
}

/// Reads a JSON-Lines corpus: one `{"tokens": [...], "mentions": [...]}`
/// object per line. Every sentence is validated.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sj: SentenceJson = serde_json::from_str(line)
            .map_err(|e| Error::parse(path.display().to_string(), lineno, e.to_string()))?;
        let mentions = sj
            .mentions
            .into_iter()
            .map(|m| {
                EntityMention::new(m.frags.iter().map(|f| (f[0], f[1])).collect(), m.type_id)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::parse(path.display().to_string(), lineno, e.to_string()))?;
        let s = Sentence {
            tokens: sj.tokens,
            mentions,
        };
        s.validate(None)
            .map_err(|e| Error::parse(path.display().to_string(), lineno, e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}

pub fn corpus_to_jsonl(corpus: &[Sentence]) -> String {
    let mut out = String::new();
    for s in corpus {
        let sj = SentenceJson {
            tokens: s.tokens.clone(),
            mentions: s
                .mentions
                .iter()
                .map(|m| MentionJson {
                    frags: m.fragments.iter().map(|&(a, b)| [a, b]).collect(),
                    type_id: m.type_id,
                })
                .collect(),
        };
        // Serialization of these plain structs cannot fail.
        let _ = writeln!(out, "{}", serde_json::to_string(&sj).unwrap());
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus_to_jsonl(corpus))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Type-names file: one name per line, line number = type id.
pub fn load_type_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidData(format!(
            "no type names in {}",
            path.display()
        )));
    }
    Ok(names)
}

// ── vocabulary ──────────────────────────────────────────────────────

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token vocabulary with reserved pad/unknown slots. Ordering is stable:
/// first occurrence in the corpus.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: vec!["<pad>".to_string(), "<unk>".to_string()],
        };
        for t in tokens {
            if !v.token_to_id.contains_key(&t) {
                v.token_to_id.insert(t.clone(), v.id_to_token.len());
                v.id_to_token.push(t);
            }
        }
        v
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always present
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens in id order, including the reserved entries.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

pub fn build_vocab(corpus: &[Sentence]) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::InvalidData("cannot build vocab of empty corpus".into()));
    }
    Ok(Vocab::from_tokens(
        corpus.iter().flat_map(|s| s.tokens.iter().cloned()),
    ))
}

// ── pointer-target encoding ─────────────────────────────────────────

/// Decoder target over the unified pointer index space: source positions
/// `[0, N)`, then type slots `[N, N + n_types)`, then end-of-sequence at
/// `N + n_types`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointerTarget {
    pub indices: Vec<usize>,
}

pub fn eos_index(n_tokens: usize, n_types: usize) -> usize {
    n_tokens + n_types
}

/// Mentions to pointer indices: sorted by (first token, last token, type),
/// each mention emits its token positions in order then its type slot; the
/// sequence ends with EOS.
pub fn linearize_targets(s: &Sentence, n_types: usize) -> Result<PointerTarget> {
    s.validate(Some(n_types))?;
    let n = s.tokens.len();
    let mut order: Vec<&EntityMention> = s.mentions.iter().collect();
    order.sort_by_key(|m| (m.first_token(), m.last_token(), m.type_id));
    let mut indices = Vec::new();
    for m in order {
        indices.extend(m.token_positions());
        indices.push(n + m.type_id);
    }
    indices.push(eos_index(n, n_types));
    Ok(PointerTarget { indices })
}

/// Greedy inverse of [`linearize_targets`], robust to arbitrary model
/// output. A run of source indices closed by a type slot becomes one
/// mention; malformed runs (no positions before the type, repeated or
/// non-increasing positions, out-of-range indices) are discarded and
/// counted. Parsing stops at EOS or end of input. Never fails.
pub fn delinearize(
    t: &PointerTarget,
    n_tokens: usize,
    n_types: usize,
) -> (Vec<EntityMention>, usize) {
    let eos = eos_index(n_tokens, n_types);
    let mut mentions = Vec::new();
    let mut discarded = 0usize;
    let mut run: Vec<usize> = Vec::new();
    let mut poisoned = false;
    for &idx in &t.indices {
        if idx == eos {
            break;
        }
        if idx < n_tokens {
            if let Some(&last) = run.last() {
                if idx <= last {
                    poisoned = true;
                }
            }
            run.push(idx);
        } else if idx < eos {
            // Type slot closes the current run.
            let type_id = idx - n_tokens;
            if run.is_empty() || poisoned {
                discarded += 1;
            } else {
                let fragments = positions_to_fragments(&run);
                // Positions are strictly increasing here, so construction
                // cannot fail.
                mentions.push(EntityMention::new(fragments, type_id).unwrap());
            }
            run.clear();
            poisoned = false;
        } else {
            // Beyond the index space entirely; poisons the current run.
            poisoned = true;
        }
    }
    if !run.is_empty() || poisoned {
        discarded += 1;
    }
    (mentions, discarded)
}

fn positions_to_fragments(positions: &[usize]) -> Vec<(usize, usize)> {
    let mut frags: Vec<(usize, usize)> = Vec::new();
    for &p in positions {
        match frags.last_mut() {
            Some(last) if p == last.1 + 1 => last.1 = p,
            _ => frags.push((p, p)),
        }
    }
    frags
}

/// Multiset of (fragments, type) pairs, used by evaluation and tests.
pub fn mention_multiset(mentions: &[EntityMention]) -> HashMap<(Vec<(usize, usize)>, usize), usize> {
    let mut map = HashMap::new();
    for m in mentions {
        *map.entry((m.fragments.clone(), m.type_id)).or_insert(0) += 1;
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(tokens: &[&str], mentions: Vec<EntityMention>) -> Sentence {
        Sentence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            mentions,
        }
    }

    #[test]
    fn mention_merges_adjacent_fragments() {
        let m = EntityMention::new(vec![(1, 2), (3, 4)], 0).unwrap();
        assert_eq!(m.fragments, vec![(1, 4)]);
        let m = EntityMention::new(vec![(1, 2), (4, 4)], 0).unwrap();
        assert_eq!(m.fragments, vec![(1, 2), (4, 4)]);
    }

    #[test]
    fn mention_rejects_overlap_and_disorder() {
        assert!(EntityMention::new(vec![(3, 4), (1, 2)], 0).is_err());
        assert!(EntityMention::new(vec![(1, 3), (2, 4)], 0).is_err());
        assert!(EntityMention::new(vec![(2, 1)], 0).is_err());
        assert!(EntityMention::new(vec![], 0).is_err());
    }

    #[test]
    fn linearize_basic() {
        // N=5, |T|=2, mention tokens {1,2} type 0 -> [1, 2, 5, 7].
        let s = sent(
            &["a", "b", "c", "d", "e"],
            vec![EntityMention::new(vec![(1, 2)], 0).unwrap()],
        );
        let t = linearize_targets(&s, 2).unwrap();
        assert_eq!(t.indices, vec![1, 2, 5, 7]);
    }

    #[test]
    fn linearize_empty_is_eos_only() {
        let s = sent(&["a", "b", "c", "d"], vec![]);
        assert_eq!(linearize_targets(&s, 3).unwrap().indices, vec![7]);
    }

    #[test]
    fn linearize_discontinuous_paper_example() {
        // "I am having aching in the legs and shoulders", mention tokens
        // {3,4,8}: with N=9, |T|=1, type 0 -> [3,4,8,9,10].
        let s = sent(
            &["I", "am", "having", "aching", "in", "the", "legs", "and", "shoulders"],
            vec![EntityMention::new(vec![(3, 4), (8, 8)], 0).unwrap()],
        );
        let t = linearize_targets(&s, 1).unwrap();
        assert_eq!(t.indices, vec![3, 4, 8, 9, 10]);
    }

    #[test]
    fn delinearize_inverse_of_linearize() {
        let t = PointerTarget {
            indices: vec![1, 2, 5, 7],
        };
        let (mentions, discarded) = delinearize(&t, 5, 2);
        assert_eq!(discarded, 0);
        assert_eq!(mentions, vec![EntityMention::new(vec![(1, 2)], 0).unwrap()]);
    }

    #[test]
    fn delinearize_eos_only() {
        let (mentions, discarded) = delinearize(&PointerTarget { indices: vec![7] }, 4, 3);
        assert!(mentions.is_empty());
        assert_eq!(discarded, 0);
    }

    #[test]
    fn delinearize_type_without_positions_discards() {
        let (mentions, discarded) = delinearize(&PointerTarget { indices: vec![5, 7] }, 5, 2);
        assert!(mentions.is_empty());
        assert_eq!(discarded, 1);
    }

    #[test]
    fn delinearize_discards_bad_runs_and_continues() {
        // [2, 1, type0] non-increasing -> discarded; then a valid run.
        let (mentions, discarded) = delinearize(
            &PointerTarget {
                indices: vec![2, 1, 5, 0, 1, 6, 7],
            },
            5,
            2,
        );
        assert_eq!(discarded, 1);
        assert_eq!(mentions, vec![EntityMention::new(vec![(0, 1)], 1).unwrap()]);
    }

    #[test]
    fn vocab_ids_stable_and_reserved() {
        let corpus = vec![sent(&["a", "b", "a"], vec![])];
        let v = build_vocab(&corpus).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.token(2), "a");
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn build_vocab_rejects_empty() {
        assert!(build_vocab(&[]).is_err());
    }

    #[test]
    fn corpus_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = vec![
            sent(
                &["Beijing"],
                vec![EntityMention::new(vec![(0, 0)], 1).unwrap()],
            ),
            sent(&["x", "y"], vec![]),
        ];
        save_corpus(&path, &corpus).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn load_corpus_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[\"a\"],\"mentions\":[]}\n{\"tokens\":[\"a\"],\"mentions\":[{\"frags\":[[0,5]],\"type\":0}]}\n",
        )
        .unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "missing line number: {err}");
    }

    #[test]
    fn load_corpus_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }
}
