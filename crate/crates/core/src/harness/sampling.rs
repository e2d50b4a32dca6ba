use rand::Rng;

use crate::error::{FedError, Result};
use crate::rng::{stream, Purpose};

/// `m` distinct client ids out of `n`, uniformly without replacement, in
/// ascending order. Deterministic in `(seed, round)`.
pub fn sample_clients(n: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if m > n {
        return Err(FedError::invalid(format!("cannot sample {m} of {n} clients")));
    }
    if m == 0 {
        return Err(FedError::invalid("must sample at least one client"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, Purpose::Sampling, round as u64, 0);
    // partial Fisher-Yates: the first m slots end up a uniform m-subset
    for i in 0..m {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(m);
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_participation_is_everyone() {
        for seed in [0, 1, 42] {
            assert_eq!(sample_clients(6, 6, 3, seed).unwrap(), (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = sample_clients(50, 5, 9, 42).unwrap();
        assert_eq!(a, sample_clients(50, 5, 9, 42).unwrap());
        assert_ne!(a, sample_clients(50, 5, 10, 42).unwrap());
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
    }

    #[test]
    fn rejects_oversampling() {
        assert!(sample_clients(3, 4, 0, 1).is_err());
        assert!(sample_clients(3, 0, 0, 1).is_err());
    }

    #[test]
    fn marginal_inclusion() {
        let draws = 60_000;
        let mut counts = [0usize; 4];
        for r in 0..draws {
            for i in sample_clients(4, 2, r, 7).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.5).abs() < 0.01);
        }
    }
}
