//! Synthetic corpus generation.
//!
//! Sentences are filler tokens with entity groups spliced in. Entity
//! positions carry dedicated per-type words (`e{t}w{k}`) or shared
//! ambiguous words (`s{k}`), so mentions are recoverable from token
//! identity; the first token of every mention is always a dedicated word,
//! keeping types learnable. Discontinuous fragments are bridged by gap
//! tokens (`g{k}`) that appear nowhere else, while separate mentions are
//! separated by ordinary fillers (`f{k}`), so the structures stay
//! decidable.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EntityMention, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize)]
pub struct SynthConfig {
    pub sentences: usize,
    pub n_types: usize,
    /// Inclusive sentence length range.
    pub len_range: (usize, usize),
    /// Per-sentence probability that the primary entity group is flat /
    /// nested / discontinuous; the remainder yields no entities.
    pub flat_rate: f64,
    pub nested_rate: f64,
    pub discontinuous_rate: f64,
    /// Probability of splicing in a second, independent flat group.
    pub second_group_rate: f64,
    /// Probability that a non-initial mention token uses a shared word.
    pub shared_word_rate: f64,
    pub filler_vocab: usize,
    pub words_per_type: usize,
    pub shared_words: usize,
    pub gap_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sentences: 200,
            n_types: 3,
            len_range: (6, 12),
            flat_rate: 0.4,
            nested_rate: 0.25,
            discontinuous_rate: 0.25,
            second_group_rate: 0.3,
            shared_word_rate: 0.3,
            filler_vocab: 30,
            words_per_type: 6,
            shared_words: 4,
            gap_words: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.flat_rate,
            self.nested_rate,
            self.discontinuous_rate,
            self.second_group_rate,
            self.shared_word_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("rates must lie in [0, 1]".into()));
        }
        let sum = self.flat_rate + self.nested_rate + self.discontinuous_rate;
        if sum > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "category rates sum to {sum}, must be <= 1"
            )));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::InvalidConfig(format!(
                "bad length range {:?}",
                self.len_range
            )));
        }
        if self.n_types == 0 || self.words_per_type == 0 || self.filler_vocab == 0 {
            return Err(Error::InvalidConfig(
                "need at least one type, one word per type, one filler".into(),
            ));
        }
        if self.nested_rate > 0.0 && self.len_range.1 < 3 {
            return Err(Error::InvalidConfig(
                "nested entities need sentences of length >= 3".into(),
            ));
        }
        if self.nested_rate > 0.0 && self.n_types < 2 {
            return Err(Error::InvalidConfig(
                "nested entities need at least two types".into(),
            ));
        }
        if self.discontinuous_rate > 0.0 && self.len_range.1 < 3 {
            return Err(Error::InvalidConfig(
                "discontinuous entities need sentences of length >= 3".into(),
            ));
        }
        if self.discontinuous_rate > 0.0 && self.gap_words == 0 {
            return Err(Error::InvalidConfig(
                "discontinuous entities need gap words".into(),
            ));
        }
        Ok(())
    }
}

pub fn default_type_names(n: usize) -> Vec<String> {
    (0..n).map(|t| format!("type{t}")).collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Category {
    Flat,
    Nested,
    Discontinuous,
    None,
}

/// Deterministically generates a corpus for the given seed.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sentence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.sentences);
    let mut counts = [0usize; 3];
    for _ in 0..cfg.sentences {
        let (s, cat) = gen_sentence(cfg, &mut rng, None)?;
        match cat {
            Category::Flat => counts[0] += 1,
            Category::Nested => counts[1] += 1,
            Category::Discontinuous => counts[2] += 1,
            Category::None => {}
        }
        out.push(s);
    }
    // Guarantee at least one of each requested category.
    let requested = [
        (Category::Flat, cfg.flat_rate, 0),
        (Category::Nested, cfg.nested_rate, 1),
        (Category::Discontinuous, cfg.discontinuous_rate, 2),
    ];
    let missing: Vec<Category> = requested
        .iter()
        .filter(|&&(_, rate, idx)| rate > 0.0 && counts[idx] == 0)
        .map(|&(c, _, _)| c)
        .collect();
    if missing.len() > out.len() {
        return Err(Error::InvalidConfig(
            "too few sentences to cover every requested category".into(),
        ));
    }
    for (k, cat) in missing.into_iter().enumerate() {
        let slot = out.len() - 1 - k;
        out[slot] = gen_sentence(cfg, &mut rng, Some(cat))?.0;
    }
    Ok(out)
}

fn gen_sentence(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    force: Option<Category>,
) -> Result<(Sentence, Category)> {
    let len = rng.gen_range(cfg.len_range.0..=cfg.len_range.1);
    let cat = force.unwrap_or_else(|| {
        let u: f64 = rng.gen();
        if u < cfg.flat_rate {
            Category::Flat
        } else if u < cfg.flat_rate + cfg.nested_rate {
            Category::Nested
        } else if u < cfg.flat_rate + cfg.nested_rate + cfg.discontinuous_rate {
            Category::Discontinuous
        } else {
            Category::None
        }
    });
    // A forced category must fit; retry the length if it cannot.
    let min_len = match cat {
        Category::Nested | Category::Discontinuous => 3,
        _ => 1,
    };
    let len = len.max(min_len.min(cfg.len_range.1)).max(cfg.len_range.0);

    let mut tokens: Vec<String> = (0..len)
        .map(|_| format!("f{}", rng.gen_range(0..cfg.filler_vocab)))
        .collect();
    let mut mentions = Vec::new();
    let mut occupied: Option<(usize, usize)> = None;

    match cat {
        Category::None => {}
        Category::Flat => {
            let l = rng.gen_range(1..=3.min(len));
            let start = rng.gen_range(0..=len - l);
            let t = rng.gen_range(0..cfg.n_types);
            write_entity_words(cfg, rng, &mut tokens, start, l, t);
            mentions.push(EntityMention::new(vec![(start, start + l - 1)], t)?);
            occupied = Some((start, start + l - 1));
        }
        Category::Nested => {
            let lo = rng.gen_range(3..=5.min(len));
            let start = rng.gen_range(0..=len - lo);
            let t = rng.gen_range(0..cfg.n_types);
            let mut u = rng.gen_range(0..cfg.n_types - 1);
            if u >= t {
                u += 1;
            }
            let li = rng.gen_range(1..=lo - 2);
            let a = rng.gen_range(1..=lo - 1 - li);
            write_entity_words(cfg, rng, &mut tokens, start, lo, t);
            write_entity_words(cfg, rng, &mut tokens, start + a, li, u);
            mentions.push(EntityMention::new(vec![(start, start + lo - 1)], t)?);
            mentions.push(EntityMention::new(
                vec![(start + a, start + a + li - 1)],
                u,
            )?);
            occupied = Some((start, start + lo - 1));
        }
        Category::Discontinuous => {
            let l1 = rng.gen_range(1..=2.min(len.saturating_sub(2)).max(1));
            let gap = rng.gen_range(1..=2.min(len.saturating_sub(l1 + 1)).max(1));
            let span = l1 + gap + 1;
            debug_assert!(span <= len);
            let start = rng.gen_range(0..=len - span);
            let t = rng.gen_range(0..cfg.n_types);
            write_entity_words(cfg, rng, &mut tokens, start, l1, t);
            for g in 0..gap {
                tokens[start + l1 + g] = format!("g{}", rng.gen_range(0..cfg.gap_words));
            }
            write_entity_words(cfg, rng, &mut tokens, start + l1 + gap, 1, t);
            mentions.push(EntityMention::new(
                vec![(start, start + l1 - 1), (start + span - 1, start + span - 1)],
                t,
            )?);
            occupied = Some((start, start + span - 1));
        }
    }

    // Optional second flat group, separated from the first by at least one
    // filler so distinct mentions never abut.
    if cat != Category::None && rng.gen::<f64>() < cfg.second_group_rate {
        let l = rng.gen_range(1..=2);
        let (os, oe) = occupied.unwrap();
        let starts: Vec<usize> = (0..=len.saturating_sub(l))
            .filter(|&s| s + l < os || s > oe + 1)
            .collect();
        if !starts.is_empty() {
            let start = starts[rng.gen_range(0..starts.len())];
            let t = rng.gen_range(0..cfg.n_types);
            write_entity_words(cfg, rng, &mut tokens, start, l, t);
            mentions.push(EntityMention::new(vec![(start, start + l - 1)], t)?);
        }
    }

    mentions.sort_by_key(|m| (m.first_token(), m.last_token(), m.type_id));
    let s = Sentence { tokens, mentions };
    s.validate(Some(cfg.n_types))?;
    Ok((s, cat))
}

fn write_entity_words(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    tokens: &mut [String],
    start: usize,
    len: usize,
    type_id: usize,
) {
    for k in 0..len {
        let shared =
            k > 0 && cfg.shared_words > 0 && rng.gen::<f64>() < cfg.shared_word_rate;
        tokens[start + k] = if shared {
            format!("s{}", rng.gen_range(0..cfg.shared_words))
        } else {
            format!("e{}w{}", type_id, rng.gen_range(0..cfg.words_per_type))
        };
    }
}

/// Rough per-sentence category of a generated sentence, for rate checks.
pub fn sentence_category(s: &Sentence) -> Option<&'static str> {
    if s.mentions.iter().any(EntityMention::is_discontinuous) {
        return Some("discontinuous");
    }
    for (i, a) in s.mentions.iter().enumerate() {
        for b in s.mentions.iter().skip(i + 1) {
            let (af, al) = (a.first_token(), a.last_token());
            let (bf, bl) = (b.first_token(), b.last_token());
            if (af <= bf && bl <= al) || (bf <= af && al <= bl) {
                return Some("nested");
            }
        }
    }
    if !s.mentions.is_empty() {
        return Some("flat");
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig {
            sentences: 50,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg, 9).unwrap();
        let b = generate_synthetic(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flat_only_config_yields_only_flat() {
        let cfg = SynthConfig {
            sentences: 40,
            flat_rate: 1.0,
            nested_rate: 0.0,
            discontinuous_rate: 0.0,
            second_group_rate: 0.0,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic(&cfg, 3).unwrap();
        for s in &corpus {
            assert!(!s.mentions.is_empty());
            assert!(s.mentions.iter().all(|m| m.fragments.len() == 1));
            assert_eq!(sentence_category(s), Some("flat"));
        }
    }

    #[test]
    fn discontinuous_present_at_half_rate() {
        let cfg = SynthConfig {
            sentences: 200,
            flat_rate: 0.0,
            nested_rate: 0.0,
            discontinuous_rate: 0.5,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic(&cfg, 5).unwrap();
        let n_disc = corpus
            .iter()
            .filter(|s| s.mentions.iter().any(EntityMention::is_discontinuous))
            .count();
        assert!(n_disc >= 1, "no discontinuous mention generated");
    }

    #[test]
    fn rates_respected_over_large_corpus() {
        let cfg = SynthConfig {
            sentences: 1000,
            flat_rate: 0.4,
            nested_rate: 0.25,
            discontinuous_rate: 0.25,
            second_group_rate: 0.0,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic(&cfg, 11).unwrap();
        let frac = |cat: &str| {
            corpus
                .iter()
                .filter(|s| sentence_category(s) == Some(cat))
                .count() as f64
                / corpus.len() as f64
        };
        assert!((frac("flat") - 0.4).abs() < 0.04, "flat {}", frac("flat"));
        assert!(
            (frac("nested") - 0.25).abs() < 0.025,
            "nested {}",
            frac("nested")
        );
        assert!(
            (frac("discontinuous") - 0.25).abs() < 0.025,
            "disc {}",
            frac("discontinuous")
        );
    }

    #[test]
    fn infeasible_configs_rejected() {
        let nested_too_short = SynthConfig {
            nested_rate: 0.5,
            len_range: (1, 2),
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&nested_too_short, 0).is_err());
        let one_type_nested = SynthConfig {
            nested_rate: 0.5,
            n_types: 1,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&one_type_nested, 0).is_err());
        let over_one = SynthConfig {
            flat_rate: 0.9,
            nested_rate: 0.2,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&over_one, 0).is_err());
    }

    #[test]
    fn every_requested_category_present() {
        let cfg = SynthConfig {
            sentences: 30,
            flat_rate: 0.9,
            nested_rate: 0.05,
            discontinuous_rate: 0.05,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic(&cfg, 1).unwrap();
        for cat in ["flat", "nested", "discontinuous"] {
            assert!(
                corpus.iter().any(|s| sentence_category(s) == Some(cat)),
                "missing {cat}"
            );
        }
    }
}
