//! Gold token-pair relation labels.
//!
//! Every unordered token pair of a sentence is labeled None, Begin-End
//! (the two ends of one mention), or Star-Inside (a same-mention pair
//! touching an interior token). The grid is symmetric, and a single-token
//! mention puts Begin-End on its diagonal cell. When overlapping mentions
//! disagree, the rarer label wins: Begin-End over Star-Inside over None.

use std::fmt::Write as _;

use crate::corpus::Sentence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationLabel {
    None = 0,
    BeginEnd = 1,
    StarInside = 2,
}

impl RelationLabel {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    fn priority(self) -> u8 {
        match self {
            RelationLabel::BeginEnd => 2,
            RelationLabel::StarInside => 1,
            RelationLabel::None => 0,
        }
    }
}

/// Symmetric n×n grid of pair labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationGrid {
    n: usize,
    labels: Vec<RelationLabel>,
}

impl RelationGrid {
    pub fn empty(n: usize) -> Self {
        RelationGrid {
            n,
            labels: vec![RelationLabel::None; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> RelationLabel {
        self.labels[i * self.n + j]
    }

    /// Writes `label` at (i, j) and (j, i), keeping the higher-priority
    /// label on conflict.
    fn assign(&mut self, i: usize, j: usize, label: RelationLabel) {
        for idx in [i * self.n + j, j * self.n + i] {
            if label.priority() > self.labels[idx].priority() {
                self.labels[idx] = label;
            }
        }
    }

    /// Gold class index per cell in row-major order, as consumed by the
    /// relation loss.
    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    /// Debug dump: n lines of n space-separated label ids.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}", self.get(i, j).index());
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the gold grid for a sentence. Order-free: the result does not
/// depend on the mention list order.
pub fn build_grid(s: &Sentence) -> RelationGrid {
    let mut grid = RelationGrid::empty(s.tokens.len());
    for m in &s.mentions {
        let positions = m.token_positions();
        let b = positions[0];
        let e = *positions.last().unwrap();
        if positions.len() == 1 {
            grid.assign(b, b, RelationLabel::BeginEnd);
            continue;
        }
        grid.assign(b, e, RelationLabel::BeginEnd);
        // Pairs of same-mention tokens where at least one side is an
        // interior (neither begin nor end) token.
        for (ai, &x) in positions.iter().enumerate() {
            for &y in positions.iter().skip(ai + 1) {
                if (x != b && x != e) || (y != b && y != e) {
                    grid.assign(x, y, RelationLabel::StarInside);
                }
            }
        }
    }
    grid
}

/// Exact label counts over a set of grids, indexed by
/// `RelationLabel::index()`.
pub fn class_distribution(grids: &[RelationGrid]) -> Result<[u64; RelationLabel::COUNT]> {
    if grids.is_empty() {
        return Err(Error::InvalidData(
            "class distribution of zero grids".into(),
        ));
    }
    let mut counts = [0u64; RelationLabel::COUNT];
    for g in grids {
        for l in &g.labels {
            counts[l.index()] += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityMention;

    fn sent(n: usize, mentions: Vec<EntityMention>) -> Sentence {
        Sentence {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            mentions,
        }
    }

    #[test]
    fn aching_in_shoulders_grid() {
        // Tokens {3, 4, 8}: (3,8) Begin-End; (3,4) and (4,8) Star-Inside.
        let s = sent(9, vec![EntityMention::new(vec![(3, 4), (8, 8)], 0).unwrap()]);
        let g = build_grid(&s);
        assert_eq!(g.get(3, 8), RelationLabel::BeginEnd);
        assert_eq!(g.get(8, 3), RelationLabel::BeginEnd);
        assert_eq!(g.get(3, 4), RelationLabel::StarInside);
        assert_eq!(g.get(4, 8), RelationLabel::StarInside);
        let counts = class_distribution(std::slice::from_ref(&g)).unwrap();
        assert_eq!(counts, [75, 2, 4]);
    }

    #[test]
    fn empty_sentence_all_none() {
        let g = build_grid(&sent(3, vec![]));
        let counts = class_distribution(std::slice::from_ref(&g)).unwrap();
        assert_eq!(counts, [9, 0, 0]);
    }

    #[test]
    fn single_token_mention_on_diagonal() {
        let s = sent(4, vec![EntityMention::new(vec![(2, 2)], 0).unwrap()]);
        let g = build_grid(&s);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if (i, j) == (2, 2) {
                    RelationLabel::BeginEnd
                } else {
                    RelationLabel::None
                };
                assert_eq!(g.get(i, j), expect, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn two_grids_double_counts() {
        let s = sent(3, vec![EntityMention::new(vec![(0, 1)], 0).unwrap()]);
        let g = build_grid(&s);
        let one = class_distribution(std::slice::from_ref(&g)).unwrap();
        let two = class_distribution(&[g.clone(), g]).unwrap();
        assert_eq!(two, [one[0] * 2, one[1] * 2, one[2] * 2]);
    }

    #[test]
    fn distribution_rejects_empty_list() {
        assert!(class_distribution(&[]).is_err());
    }

    #[test]
    fn grid_dump_format() {
        let s = sent(2, vec![EntityMention::new(vec![(0, 1)], 0).unwrap()]);
        assert_eq!(build_grid(&s).dump(), "0 1\n1 0\n");
    }
}
