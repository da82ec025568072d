//! Attention mask construction: full causal, hard hybrid (global prefix +
//! sliding window over generated tokens), and the curriculum soft mask
//! that replaces -inf with a finite penalty -tau outside the window.
//!
//! Masks are materialized densely here for training and testing; the
//! decode path never builds them, it walks the cache's visible set
//! directly.

use crate::model::SequenceLayout;
use crate::numerics::Matrix;

/// Window size for generated-token attention. `Unbounded` is the full
/// causal baseline (W = infinity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowSpec {
    Bounded(usize),
    Unbounded,
}

impl WindowSpec {
    pub fn bounded(self) -> Option<usize> {
        match self {
            WindowSpec::Bounded(w) => Some(w),
            WindowSpec::Unbounded => None,
        }
    }
}

impl std::fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WindowSpec::Bounded(w) => write!(f, "{w}"),
            WindowSpec::Unbounded => write!(f, "inf"),
        }
    }
}

/// Additive attention mask over a laid-out sequence. Entries are 0 for
/// visible keys, -inf for forbidden keys, and -tau in the curriculum's
/// soft phase. Row i masks the keys of query position i.
#[derive(Debug, Clone)]
pub struct AdditiveMask {
    pub layout: SequenceLayout,
    pub entries: Matrix,
}

impl AdditiveMask {
    pub fn total(&self) -> usize {
        self.layout.total()
    }
}

/// Standard causal mask: entry (i, j) = 0 iff j <= i, else -inf.
pub fn causal_full_mask(layout: SequenceLayout) -> AdditiveMask {
    let n = layout.total();
    let mut entries = Matrix::zeros(n, n);
    for i in 0..n {
        let row = entries.row_mut(i);
        for v in row[i + 1..].iter_mut() {
            *v = f32::NEG_INFINITY;
        }
    }
    AdditiveMask { layout, entries }
}

/// Hybrid mask: prefix queries are plain causal; generated queries see the
/// whole prefix plus the previous `w` generated tokens plus themselves.
pub fn hybrid_mask(layout: SequenceLayout, w: WindowSpec) -> AdditiveMask {
    let mut mask = causal_full_mask(layout);
    let w = match w.bounded() {
        Some(w) => w,
        None => return mask,
    };
    let prefix = layout.prefix_len;
    for i in prefix..layout.total() {
        let row = mask.entries.row_mut(i);
        // Generated keys further back than w are dropped; prefix keys and
        // the self key always stay.
        for (j, v) in row.iter_mut().enumerate().take(i).skip(prefix) {
            if i - j > w {
                *v = f32::NEG_INFINITY;
            }
        }
    }
    mask
}

/// Curriculum soft mask: the positions the hybrid mask would forbid carry
/// a finite penalty -tau instead of -inf. Causal-future keys remain -inf.
pub fn curriculum_mask(layout: SequenceLayout, w_of_t: usize, tau_of_t: f64) -> AdditiveMask {
    let mut mask = causal_full_mask(layout);
    let prefix = layout.prefix_len;
    let penalty = -(tau_of_t as f32);
    for i in prefix..layout.total() {
        let row = mask.entries.row_mut(i);
        for (j, v) in row.iter_mut().enumerate().take(i).skip(prefix) {
            if i - j > w_of_t {
                *v = penalty;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{masked_softmax, Matrix};

    fn layout(prefix: usize, gen: usize) -> SequenceLayout {
        SequenceLayout::new(prefix, gen).unwrap()
    }

    /// Direct set-builder reading of the windowed-attention rule, used as
    /// the oracle for the mask constructors.
    fn visible_set(layout: SequenceLayout, i: usize, w: Option<usize>) -> Vec<usize> {
        let p = layout.prefix_len;
        (0..layout.total())
            .filter(|&j| {
                if j > i {
                    return false;
                }
                if i < p || j < p || j == i {
                    return true;
                }
                match w {
                    Some(w) => i - j <= w,
                    None => true,
                }
            })
            .collect()
    }

    fn zeros_of_row(mask: &AdditiveMask, i: usize) -> Vec<usize> {
        mask.entries
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    #[test]
    fn causal_rows() {
        let m = causal_full_mask(layout(2, 1));
        assert_eq!(m.entries.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(
            m.entries.row(0),
            &[0.0, f32::NEG_INFINITY, f32::NEG_INFINITY]
        );
    }

    #[test]
    fn causal_zero_count_is_triangular() {
        let m = causal_full_mask(layout(3, 3));
        let zeros = m.entries.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 21);
    }

    #[test]
    fn hybrid_visible_set_example() {
        let m = hybrid_mask(layout(3, 5), WindowSpec::Bounded(2));
        assert_eq!(zeros_of_row(&m, 7), vec![0, 1, 2, 5, 6, 7]);
    }

    #[test]
    fn hybrid_unbounded_equals_causal() {
        let l = layout(4, 6);
        let h = hybrid_mask(l, WindowSpec::Unbounded);
        let c = causal_full_mask(l);
        assert_eq!(h.entries.data(), c.entries.data());
    }

    #[test]
    fn hybrid_matches_set_builder_oracle() {
        for prefix in 1..=4 {
            for gen in 0..=6 {
                for w in 1..=5 {
                    let l = layout(prefix, gen);
                    let m = hybrid_mask(l, WindowSpec::Bounded(w));
                    for i in 0..l.total() {
                        assert_eq!(
                            zeros_of_row(&m, i),
                            visible_set(l, i, Some(w)),
                            "prefix={prefix} gen={gen} w={w} row={i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hybrid_per_row_visible_count() {
        let prefix = 4;
        let gen = 9;
        let w = 3;
        let m = hybrid_mask(layout(prefix, gen), WindowSpec::Bounded(w));
        for k in 1..=gen {
            let i = prefix + k - 1;
            let count = zeros_of_row(&m, i).len();
            assert_eq!(count, prefix + k.min(w + 1), "gen query {k}");
        }
    }

    #[test]
    fn hybrid_refines_causal() {
        let l = layout(3, 8);
        let c = causal_full_mask(l);
        let h = hybrid_mask(l, WindowSpec::Bounded(2));
        for (hc, cc) in h.entries.data().iter().zip(c.entries.data()) {
            if *cc == f32::NEG_INFINITY {
                assert_eq!(*hc, f32::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn window_monotone_in_w() {
        let l = layout(2, 10);
        for w1 in 1..6 {
            let m1 = hybrid_mask(l, WindowSpec::Bounded(w1));
            let m2 = hybrid_mask(l, WindowSpec::Bounded(w1 + 1));
            for i in 0..l.total() {
                let v1 = zeros_of_row(&m1, i);
                let v2 = zeros_of_row(&m2, i);
                assert!(v1.iter().all(|j| v2.contains(j)));
            }
        }
    }

    #[test]
    fn no_row_fully_masked() {
        for (p, g) in [(1, 0), (1, 5), (3, 7)] {
            let m = hybrid_mask(layout(p, g), WindowSpec::Bounded(1));
            for i in 0..m.total() {
                assert!(m.entries.row(i).iter().any(|&v| v == 0.0), "row {i}");
            }
        }
    }

    #[test]
    fn curriculum_zero_tau_equals_causal() {
        let l = layout(3, 6);
        let c = causal_full_mask(l);
        let m = curriculum_mask(l, 2, 0.0);
        for (mv, cv) in m.entries.data().iter().zip(c.entries.data()) {
            if *cv == 0.0 {
                assert_eq!(*mv, 0.0);
            } else {
                assert_eq!(*mv, f32::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn curriculum_large_tau_numerically_hard() {
        let l = layout(2, 8);
        let soft = curriculum_mask(l, 2, 1e4);
        // Attention through the soft mask leaks < 1e-40 onto out-of-window
        // keys, matching the hard mask to full precision.
        let logits = Matrix::zeros(l.total(), l.total());
        let p = masked_softmax(&logits, &soft.entries).unwrap();
        let hard = hybrid_mask(l, WindowSpec::Bounded(2));
        for i in 0..l.total() {
            for j in 0..l.total() {
                if hard.entries.get(i, j) == f32::NEG_INFINITY
                    && soft.entries.get(i, j) != f32::NEG_INFINITY
                {
                    assert!(p.get(i, j) < 1e-40, "leak at ({i},{j}): {}", p.get(i, j));
                }
            }
        }
    }

    #[test]
    fn curriculum_soft_weight_example() {
        // One in-window and one out-of-window key with equal logits and
        // tau = ln 3 splits attention 0.75 / 0.25.
        let l = layout(1, 3);
        let m = curriculum_mask(l, 1, 3.0f64.ln());
        let i = 3;
        assert_eq!(m.entries.get(i, 1), -(3.0f64.ln() as f32));
        assert_eq!(m.entries.get(i, 2), 0.0);
        let logits = Matrix::from_vec(1, 2, vec![2.0, 2.0]);
        let mask_row = Matrix::from_vec(1, 2, vec![m.entries.get(i, 1), m.entries.get(i, 2)]);
        let p = masked_softmax(&logits, &mask_row).unwrap();
        assert!((p.get(0, 1) - 0.75).abs() < 1e-6);
        assert!((p.get(0, 0) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn curriculum_keeps_future_hard_masked() {
        let l = layout(2, 5);
        let m = curriculum_mask(l, 1, 2.5);
        for i in 0..l.total() {
            for j in (i + 1)..l.total() {
                assert_eq!(m.entries.get(i, j), f32::NEG_INFINITY);
            }
        }
        // Prefix keys stay free for generated queries.
        for i in 2..l.total() {
            assert_eq!(m.entries.get(i, 0), 0.0);
            assert_eq!(m.entries.get(i, 1), 0.0);
        }
    }

    #[test]
    fn curriculum_converges_to_hybrid_pointwise() {
        let l = layout(2, 6);
        let hard = hybrid_mask(l, WindowSpec::Bounded(2));
        for tau in [1.0, 10.0, 100.0, 1000.0] {
            let soft = curriculum_mask(l, 2, tau);
            for i in 0..l.total() {
                for j in 0..l.total() {
                    let h = hard.entries.get(i, j);
                    let s = soft.entries.get(i, j);
                    if h == 0.0 {
                        assert_eq!(s, 0.0);
                    } else if s != f32::NEG_INFINITY {
                        assert_eq!(s, -(tau as f32));
                    }
                }
            }
        }
    }
}
