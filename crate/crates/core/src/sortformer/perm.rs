//! Permutation bookkeeping for the sort heads and losses.

use crate::error::{Error, Result};

/// Maximum `K` for the full-permutation head.
pub const FACTORIAL_MAX_K: usize = 6;

pub fn factorial(k: usize) -> usize {
    (1..=k).product()
}

pub fn is_bijection(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
}

pub fn check_bijection(perm: &[usize]) -> Result<()> {
    if is_bijection(perm) {
        Ok(())
    } else {
        Err(Error::Label(format!("{perm:?} is not a permutation")))
    }
}

/// `inverse(p)[p[i]] == i`.
pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Position of `perm` in the lexicographic list of all permutations.
pub fn lex_rank(perm: &[usize]) -> usize {
    let n = perm.len();
    let mut rank = 0;
    for i in 0..n {
        let smaller = perm[i + 1..].iter().filter(|&&x| x < perm[i]).count();
        rank += smaller * factorial(n - 1 - i);
    }
    rank
}

pub fn lex_unrank(mut rank: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..k).collect();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let f = factorial(k - 1 - i);
        out.push(pool.remove(rank / f));
        rank %= f;
    }
    out
}

/// Slot pairs `(i, j)` with `i < j`, in row-major order.
pub fn slot_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_rank_zero() {
        assert_eq!(lex_rank(&[0, 1, 2, 3]), 0);
        assert_eq!(lex_rank(&[3, 2, 1, 0]), 23);
    }

    #[test]
    fn bijection_checks() {
        assert!(is_bijection(&[2, 0, 1]));
        assert!(!is_bijection(&[0, 0, 1]));
        assert!(!is_bijection(&[0, 3]));
        assert_eq!(inverse(&[2, 0, 1]), vec![1, 2, 0]);
    }

    #[test]
    fn pair_counts() {
        assert_eq!(slot_pairs(4).len(), 6);
        assert_eq!(slot_pairs(2), vec![(0, 1)]);
    }
}
