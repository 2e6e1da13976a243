//! Average feature distances across and within groups of generated dances.

use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Maps a linear index over the `n (n - 1) / 2` unordered pairs to `(i, j)`
/// with `i < j`.
fn pair_at(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Mean distance over `num_pairs` distinct pairs drawn without replacement;
/// every pair is used when `num_pairs` reaches the total.
pub fn diversity(features: &[Vec<f64>], num_pairs: usize, seed: u64) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if num_pairs == 0 {
        return Err(Error::invalid("diversity: num_pairs must be >= 1"));
    }
    let total = n * (n - 1) / 2;
    let picks: Vec<usize> = if num_pairs >= total {
        (0..total).collect()
    } else {
        let mut v = index::sample(&mut rng_for(seed, &[stream::DIVERSITY]), total, num_pairs).into_vec();
        v.sort_unstable();
        v
    };
    let sum: f64 = picks
        .iter()
        .map(|&k| {
            let (i, j) = pair_at(k, n);
            euclidean(&features[i], &features[j])
        })
        .sum();
    Ok(sum / picks.len() as f64)
}

/// Mean pairwise distance inside each group, averaged over groups. Every
/// pair of a group is used, so no sampling seed is involved.
pub fn multimodality(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("multimodality: no groups"));
    }
    let mut acc = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::invalid(alloc::format!("multimodality: group {gi} has fewer than two members")));
        }
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                s += euclidean(&g[i], &g[j]);
                c += 1;
            }
        }
        acc += s / c as f64;
    }
    Ok(acc / groups.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn pair_indexing_covers_all_pairs() {
        let n = 6;
        let pairs: Vec<_> = (0..15).map(|k| pair_at(k, n)).collect();
        let mut want = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                want.push((i, j));
            }
        }
        assert_eq!(pairs, want);
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(diversity(&vec![vec![1.0, 1.0]; 5], 500, 0).unwrap(), 0.0);
        assert_eq!(diversity(&[vec![0.0, 0.0], vec![3.0, 0.0]], 500, 0).unwrap(), 3.0);
        assert!(diversity(&[vec![0.0]], 500, 0).is_err());
        assert_eq!(multimodality(&[vec![vec![0.0], vec![4.0]]]).unwrap(), 4.0);
        assert_eq!(multimodality(&[vec![vec![2.0]; 5]]).unwrap(), 0.0);
        assert!(multimodality(&[vec![vec![2.0]]]).is_err());
    }
}
