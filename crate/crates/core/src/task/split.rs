use rand::seq::SliceRandom;

use crate::seed;

/// Train/validation/test partition sizes: floor(0.7n), floor(0.1n), remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Instance-level split after a seeded shuffle.
pub fn split_instances<T: Clone>(items: &[T], seed: u64) -> Splits<T> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seed::rng(seed, "split-instances"));
    let (tr, va, _) = split_sizes(items.len());
    let pick = |range: &[usize]| range.iter().map(|&i| items[i].clone()).collect();
    Splits {
        train: pick(&order[..tr]),
        val: pick(&order[tr..tr + va]),
        test: pick(&order[tr + va..]),
    }
}

/// Problem-disjoint split: whole problems are assigned to one partition,
/// with problem counts following [`split_sizes`].
pub fn split_by_problem<T: Clone>(
    items: &[T],
    n_problems: usize,
    problem_of: impl Fn(&T) -> usize,
    seed: u64,
) -> Splits<T> {
    let mut problems: Vec<usize> = (0..n_problems).collect();
    problems.shuffle(&mut seed::rng(seed, "split-problems"));
    let (tr, va, _) = split_sizes(n_problems);
    let mut part = vec![2u8; n_problems];
    for &p in &problems[..tr] {
        part[p] = 0;
    }
    for &p in &problems[tr..tr + va] {
        part[p] = 1;
    }
    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for it in items {
        match part[problem_of(it)] {
            0 => out.train.push(it.clone()),
            1 => out.val.push(it.clone()),
            _ => out.test.push(it.clone()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn sizes_follow_floor_floor_remainder() {
        assert_eq!(split_sizes(200), (140, 20, 40));
        assert_eq!(split_sizes(7), (4, 0, 3));
        assert_eq!(split_sizes(33), (23, 3, 7));
    }

    #[test]
    fn problem_split_is_disjoint() {
        let items: Vec<(usize, usize)> = (0..300).map(|i| (i, i % 20)).collect();
        let s = split_by_problem(&items, 20, |x| x.1, 5);
        let train: BTreeSet<_> = s.train.iter().map(|x| x.1).collect();
        let test: BTreeSet<_> = s.test.iter().map(|x| x.1).collect();
        let val: BTreeSet<_> = s.val.iter().map(|x| x.1).collect();
        assert!(train.is_disjoint(&test) && train.is_disjoint(&val) && val.is_disjoint(&test));
        assert_eq!(s.len(), 300);
        assert_eq!((train.len(), val.len(), test.len()), (14, 2, 4));
    }

    #[test]
    fn instance_split_keeps_everything() {
        let items: Vec<usize> = (0..200).collect();
        let s = split_instances(&items, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 20, 40));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, items);
    }
}
