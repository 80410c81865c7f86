//! Query-to-target assignment: cost matrix, Hungarian solver, exhaustive oracle.

use serde::{Deserialize, Serialize};

use crate::domain::SegmentLabel;
use crate::error::{LabError, Result};
use crate::losses::mask_loss;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    /// `N x S`: rows are queries, columns are targets.
    pub values: Matrix,
    pub lambda_cls: f64,
    pub lambda_mask: f64,
}

impl CostMatrix {
    pub fn from_values(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(LabError::NonFinite("cost matrix".into()));
        }
        Ok(CostMatrix {
            values,
            lambda_cls: 1.0,
            lambda_mask: 1.0,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.rows
    }

    pub fn cols(&self) -> usize {
        self.values.cols
    }

    /// Minimum cost of each query over all targets.
    pub fn row_minima(&self) -> Vec<f64> {
        (0..self.values.rows)
            .map(|r| self.values.row(r).iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, target)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, n_queries: usize) -> Self {
        pairs.sort_unstable();
        let mut taken = vec![false; n_queries];
        for &(n, _) in &pairs {
            taken[n] = true;
        }
        MatchResult {
            unmatched_queries: (0..n_queries).filter(|&n| !taken[n]).collect(),
            pairs,
        }
    }

    /// Sum of the matched costs, accumulated in query order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(n, s)| cost.values.get(n, s)).sum()
    }

    pub fn is_injective(&self) -> bool {
        let mut ns: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        let mut ss: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        ns.sort_unstable();
        ss.sort_unstable();
        ns.windows(2).all(|w| w[0] != w[1]) && ss.windows(2).all(|w| w[0] != w[1])
    }
}

/// `A(n, s) = -lambda_cls * p_n(c_s) + lambda_mask * mask_loss(mask_n, m_s)`.
pub fn cost_matrix(
    class_probs: &Matrix,
    mask_logits: &Matrix,
    labels: &[SegmentLabel],
    lambda_cls: f64,
    lambda_mask: f64,
) -> Result<CostMatrix> {
    if labels.is_empty() {
        return Err(LabError::NoTargets);
    }
    if class_probs.rows != mask_logits.rows {
        return Err(LabError::DimensionMismatch(format!(
            "{} class rows vs {} mask rows",
            class_probs.rows, mask_logits.rows
        )));
    }
    let mut values = Matrix::zeros(class_probs.rows, labels.len());
    for n in 0..class_probs.rows {
        for (s, label) in labels.iter().enumerate() {
            let c = label.class_id.channel();
            if c >= class_probs.cols {
                return Err(LabError::UnknownClass(label.class_id.0));
            }
            let a = -lambda_cls * class_probs.get(n, c)
                + lambda_mask * mask_loss(mask_logits.row(n), &label.mask)?;
            values.set(n, s, a);
        }
    }
    if !values.is_finite() {
        return Err(LabError::NonFinite("cost matrix".into()));
    }
    Ok(CostMatrix {
        values,
        lambda_cls,
        lambda_mask,
    })
}

/// Minimum-cost injection of `min(N, S)` pairs (shortest augmenting paths with
/// dual potentials, `O(min^2 * max)`).
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Err(LabError::EmptyCostMatrix);
    }
    if !cost.values.is_finite() {
        return Err(LabError::NonFinite("cost matrix".into()));
    }
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| {
        if transposed {
            cost.values.get(j, i)
        } else {
            cost.values.get(i, j)
        }
    };

    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    Ok(MatchResult::from_pairs(pairs, n))
}

pub const BRUTE_FORCE_LIMIT: usize = 7;

/// Exhaustive search over all injections; among equal totals the
/// lexicographically smallest sorted pair list wins.
pub fn brute_force_match(cost: &CostMatrix) -> Result<MatchResult> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Err(LabError::EmptyCostMatrix);
    }
    let k = n.min(m);
    if k > BRUTE_FORCE_LIMIT {
        return Err(LabError::OracleTooLarge {
            limit: BRUTE_FORCE_LIMIT,
            got: k,
        });
    }
    let transposed = n > m;
    let (small, large) = if transposed { (m, n) } else { (n, m) };
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut chosen = vec![0usize; small];
    let mut used = vec![false; large];
    search(0, &mut chosen, &mut used, transposed, cost, &mut best);
    let (_, pairs) = best.expect("at least one injection");
    Ok(MatchResult::from_pairs(pairs, n))
}

fn search(
    depth: usize,
    chosen: &mut [usize],
    used: &mut [bool],
    transposed: bool,
    cost: &CostMatrix,
    best: &mut Option<(f64, Vec<(usize, usize)>)>,
) {
    if depth == chosen.len() {
        let mut pairs: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .map(|(i, &j)| if transposed { (j, i) } else { (i, j) })
            .collect();
        pairs.sort_unstable();
        // same summation order as MatchResult::total
        let total: f64 = pairs.iter().map(|&(r, c)| cost.values.get(r, c)).sum();
        let better = match best {
            None => true,
            Some((t, p)) => total < *t || (total == *t && pairs < *p),
        };
        if better {
            *best = Some((total, pairs));
        }
        return;
    }
    for j in 0..used.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        chosen[depth] = j;
        search(depth + 1, chosen, used, transposed, cost, best);
        used[j] = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassId, Mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(rows: &[Vec<f64>]) -> CostMatrix {
        CostMatrix::from_values(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn single_entry() {
        let c = cm(&[vec![0.0]]);
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0)]);
        assert_eq!(brute_force_match(&c).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn two_by_two_enumeration() {
        // permutations: identity total 2, swap total 4
        let c = cm(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let m = hungarian(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total(&c), 2.0);
    }

    #[test]
    fn dominant_diagonal() {
        let c = cm(&[
            vec![-5.0, 1.0, 2.0],
            vec![3.0, -5.0, 0.0],
            vec![1.0, 1.0, -5.0],
        ]);
        assert_eq!(brute_force_match(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn all_binary_two_by_two_agree() {
        for bits in 0..16u32 {
            let v: Vec<f64> = (0..4).map(|i| ((bits >> i) & 1) as f64).collect();
            let c = cm(&[v[..2].to_vec(), v[2..].to_vec()]);
            let h = hungarian(&c).unwrap();
            let b = brute_force_match(&c).unwrap();
            // oracle: both permutations of a 2x2 matrix enumerated directly
            let want = (v[0] + v[3]).min(v[1] + v[2]);
            assert_eq!(h.total(&c), want, "bits {bits:04b}");
            assert_eq!(b.total(&c), want);
        }
    }

    #[test]
    fn rectangular_random_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..200 {
            let (n, s) = if seed % 2 == 0 { (6, 4) } else { (3, 5) };
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..s).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let c = cm(&rows);
            let h = hungarian(&c).unwrap();
            let b = brute_force_match(&c).unwrap();
            assert!(h.is_injective());
            assert_eq!(h.pairs.len(), n.min(s));
            assert_eq!(h.unmatched_queries.len(), n - n.min(s));
            assert_eq!(h.total(&c), b.total(&c), "seed {seed}");
            assert_eq!(h.pairs, b.pairs);
        }
    }

    #[test]
    fn constant_shift_of_a_fully_matched_line_keeps_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let c = cm(&rows);
            let base = brute_force_match(&c).unwrap();
            // every target column is matched when N > S, so shift a column
            let col = rng.random_range(0..4);
            let k = rng.random_range(-2.0..2.0);
            let shifted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().enumerate().map(|(j, v)| if j == col { v + k } else { *v }).collect())
                .collect();
            let c2 = cm(&shifted);
            assert_eq!(hungarian(&c2).unwrap().pairs, base.pairs);

            // and rows when N <= S
            let t: Vec<Vec<f64>> = (0..4).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
            let ct = cm(&t);
            let base_t = brute_force_match(&ct).unwrap();
            let mut t2 = t.clone();
            t2[col].iter_mut().for_each(|v| *v += k);
            assert_eq!(hungarian(&cm(&t2)).unwrap().pairs, base_t.pairs);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            hungarian(&CostMatrix::from_values(Matrix::zeros(0, 3)).unwrap()),
            Err(LabError::EmptyCostMatrix)
        ));
        let big = CostMatrix::from_values(Matrix::zeros(8, 8)).unwrap();
        assert!(matches!(
            brute_force_match(&big),
            Err(LabError::OracleTooLarge { .. })
        ));
        assert!(CostMatrix::from_values(Matrix::filled(1, 1, f64::NAN)).is_err());
        let probs = Matrix::filled(2, 4, 0.25);
        assert!(matches!(
            cost_matrix(&probs, &Matrix::zeros(2, 4), &[], 2.0, 5.0),
            Err(LabError::NoTargets)
        ));
    }

    fn label(class: u16, mask: Mask) -> SegmentLabel {
        SegmentLabel {
            class_id: ClassId(class),
            mask,
            instance_id: 1,
            is_pseudo: false,
        }
    }

    #[test]
    fn cost_plug_in() {
        // p = 1 on the target class and a perfect (infinite-logit) mask
        let mask = Mask::from_fn(2, 2, |y, _| y == 0);
        let mut probs = Matrix::zeros(1, 4);
        probs.set(0, 1, 1.0);
        let logits = Matrix::from_vec(1, 4, vec![f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let c = cost_matrix(&probs, &logits, &[label(1, mask)], 2.0, 5.0).unwrap();
        assert_eq!(c.values.get(0, 0), -2.0);
    }

    #[test]
    fn cost_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, hw) = (3, 9);
        let mut probs = Matrix::zeros(n, 4);
        for r in 0..n {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (c, v) in raw.iter().enumerate() {
                probs.set(r, c, v / s);
            }
        }
        let logits = Matrix::from_vec(n, hw, (0..n * hw).map(|_| rng.random_range(-3.0..3.0)).collect());
        let labels = vec![
            label(1, Mask::from_fn(3, 3, |y, x| y + x < 2)),
            label(2, Mask::from_fn(3, 3, |y, _| y == 2)),
        ];
        let c = cost_matrix(&probs, &logits, &labels, 2.0, 5.0).unwrap();
        for r in 0..n {
            for (s, l) in labels.iter().enumerate() {
                // scalar re-evaluation: log-sigmoid BCE and Dice written out directly
                let row = logits.row(r);
                let mut bce = 0.0;
                let (mut inter, mut psum) = (0.0, 0.0);
                for (i, &x) in row.iter().enumerate() {
                    let p = 1.0 / (1.0 + (-x).exp());
                    let y = l.mask.bits[i];
                    bce -= if y { p.ln() } else { (1.0 - p).ln() };
                    psum += p;
                    if y {
                        inter += p;
                    }
                }
                let dice = 1.0 - 2.0 * inter / (psum + l.mask.area() as f64);
                let want = -2.0 * probs.get(r, l.class_id.channel()) + 5.0 * (bce / hw as f64 + dice);
                assert!((c.values.get(r, s) - want).abs() < 1e-12);
            }
        }
    }
}
