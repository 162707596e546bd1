//! Mismatch-weighted selection of environments from a sampled pool.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Result, SgdaError};

/// Expert and learner spec per environment of the previous round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutcomePairTable {
    pub pairs: Vec<(usize, usize)>,
}

impl OutcomePairTable {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs }
    }

    /// `N_phi`: pairs in which either side landed in the spec, counting a
    /// matched pair once. `M_phi`: matched pairs.
    pub fn counts(&self, num_specs: usize) -> Result<(Vec<u64>, Vec<u64>)> {
        let mut n = vec![0u64; num_specs];
        let mut m = vec![0u64; num_specs];
        for &(expert, learner) in &self.pairs {
            if expert >= num_specs || learner >= num_specs {
                return Err(SgdaError::input(format!("spec index out of range in pair ({expert}, {learner})")));
            }
            n[expert] += 1;
            if learner == expert {
                m[expert] += 1;
            } else {
                n[learner] += 1;
            }
        }
        Ok((n, m))
    }
}

/// Weights as exact fractions `(N - M, N)`; `(1, 1)` when `N = 0`.
pub fn selection_weight_fractions(table: &OutcomePairTable, num_specs: usize) -> Result<Vec<(u64, u64)>> {
    let (n, m) = table.counts(num_specs)?;
    Ok(n.iter().zip(&m).map(|(&n, &m)| if n == 0 { (1, 1) } else { (n - m, n) }).collect())
}

/// `1 - M/N`, or 1 for specs nobody landed in.
pub fn selection_weights(table: &OutcomePairTable, num_specs: usize) -> Result<Vec<f64>> {
    Ok(selection_weight_fractions(table, num_specs)?.iter().map(|&(a, b)| a as f64 / b as f64).collect())
}

/// Picks `m` distinct pool positions. Without weights (the first round) the
/// draw is uniform. Otherwise a spec is drawn from the weights renormalized
/// over specs that still have pool members, then one of its members
/// uniformly; if only zero-weight specs remain the rest is drawn uniformly.
pub fn ec_select<R: Rng + ?Sized>(
    pool_specs: &[usize],
    weights: Option<&[f64]>,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m > pool_specs.len() {
        return Err(SgdaError::input(format!("cannot select {m} from a pool of {}", pool_specs.len())));
    }
    let Some(weights) = weights else {
        return Ok(rand::seq::index::sample(rng, pool_specs.len(), m).into_vec());
    };
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(SgdaError::input("selection weights must be finite and non-negative"));
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); weights.len()];
    for (i, &spec) in pool_specs.iter().enumerate() {
        let bucket = buckets
            .get_mut(spec)
            .ok_or_else(|| SgdaError::input(format!("pool member labelled with unknown spec {spec}")))?;
        bucket.push(i);
    }
    let mut chosen = Vec::with_capacity(m);
    while chosen.len() < m {
        let live: Vec<f64> = buckets.iter().zip(weights).map(|(b, &w)| if b.is_empty() { 0.0 } else { w }).collect();
        let spec = match WeightedIndex::new(&live) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let rest: Vec<usize> = buckets.iter().flatten().copied().collect();
                let extra = rand::seq::index::sample(rng, rest.len(), m - chosen.len());
                chosen.extend(extra.iter().map(|i| rest[i]));
                break;
            }
        };
        let bucket = &mut buckets[spec];
        let pick = rng.random_range(0..bucket.len());
        chosen.push(bucket.swap_remove(pick));
    }
    Ok(chosen)
}

/// One row per spec: `N`, `M`, weight, pool members and selections.
pub fn write_report<W: Write>(
    out: W,
    table: &OutcomePairTable,
    weights: &[f64],
    pool_specs: &[usize],
    selected: &[usize],
) -> Result<()> {
    let (n, m) = table.counts(weights.len())?;
    let mut pool = vec![0usize; weights.len()];
    let mut picked = vec![0usize; weights.len()];
    for &s in pool_specs {
        pool[s] += 1;
    }
    for &i in selected {
        picked[pool_specs[i]] += 1;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["spec", "n", "m", "weight", "pool", "selected"])?;
    for j in 0..weights.len() {
        w.write_record([
            j.to_string(),
            n[j].to_string(),
            m[j].to_string(),
            weights[j].to_string(),
            pool[j].to_string(),
            picked[j].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn counts_follow_the_double_count_rule() {
        let t = OutcomePairTable::new(vec![(0, 0), (0, 1), (1, 1), (2, 3)]);
        let (n, m) = t.counts(4).unwrap();
        assert_eq!(n, vec![2, 2, 1, 1]);
        assert_eq!(m, vec![1, 1, 0, 0]);
        assert!(OutcomePairTable::new(vec![(0, 9)]).counts(4).is_err());
    }

    #[test]
    fn empty_table_weights_are_one() {
        assert_eq!(selection_weights(&OutcomePairTable::default(), 4).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn perfect_matching_zeroes_observed_specs() {
        let t = OutcomePairTable::new(vec![(0, 0), (2, 2)]);
        assert_eq!(selection_weights(&t, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn exhausting_the_pool_returns_it_all() {
        let mut rng = seed::rng(1, "t", 0);
        let mut got = ec_select(&[0, 1, 2, 3], Some(&[0.9, 0.0, 0.1, 0.0]), 4, &mut rng).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn degenerate_weights_stay_in_one_bucket() {
        let mut rng = seed::rng(2, "t", 0);
        let pool = [0, 1, 1, 2, 3, 1];
        for _ in 0..50 {
            let got = ec_select(&pool, Some(&[0.0, 1.0, 0.0, 0.0]), 2, &mut rng).unwrap();
            assert!(got.iter().all(|&i| pool[i] == 1));
        }
    }

    #[test]
    fn all_zero_weights_fall_back_to_uniform() {
        let mut rng = seed::rng(3, "t", 0);
        let got = ec_select(&[0, 1, 2], Some(&[0.0, 0.0, 0.0]), 2, &mut rng).unwrap();
        assert_eq!(got.len(), 2);
        assert_ne!(got[0], got[1]);
    }

    #[test]
    fn oversized_request_is_an_error() {
        let mut rng = seed::rng(4, "t", 0);
        assert!(ec_select(&[0, 1], None, 3, &mut rng).is_err());
        assert!(ec_select(&[0, 5], Some(&[1.0; 2]), 1, &mut rng).is_err());
    }
}
