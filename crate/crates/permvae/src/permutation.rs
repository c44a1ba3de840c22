//! Cyclic permutations over view indices: Sattolo generation, validation,
//! inversion, and per-sample bundles. Missing views are fixed points; the
//! permutation is a single cycle on the observed views (a one-element
//! observed set counts as cyclic, its cycle condition being vacuous).
//!
//! All indices in the public interface are 1-based view numbers.

use crate::rng::Rng;
use crate::{Error, Result};

/// A bijection of `{1..L}` that fixes every missing view and is a single
/// cycle on the observed views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CyclicPermutation {
    map: Vec<usize>,      // map[i-1] = sigma(i)
    observed: Vec<usize>, // ascending view indices
}

impl CyclicPermutation {
    /// Validating constructor: `map` must be a bijection of `{1..L}`, fix all
    /// indices outside `observed`, and form a single cycle on `observed`.
    pub fn new(map: Vec<usize>, observed: &[usize]) -> Result<Self> {
        let observed = normalize_observed(map.len(), observed)?;
        if !is_cyclic(&map, &observed)? {
            return Err(Error::contract(format!(
                "map {map:?} is not a single cycle on {observed:?} with fixed points elsewhere"
            )));
        }
        Ok(CyclicPermutation { map, observed })
    }

    /// Constructor for the random-permutation ablation: requires a bijection
    /// with fixed points outside `observed` but tolerates multiple cycles
    /// (and fixed points) on the observed set.
    pub fn from_bijection(map: Vec<usize>, observed: &[usize]) -> Result<Self> {
        let observed = normalize_observed(map.len(), observed)?;
        check_bijection(&map)?;
        for i in 1..=map.len() {
            if !observed.contains(&i) && map[i - 1] != i {
                return Err(Error::contract(format!("missing view {i} is not a fixed point")));
            }
        }
        Ok(CyclicPermutation { map, observed })
    }

    /// Number of views L.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// sigma(i) for a 1-based view index.
    pub fn apply(&self, i: usize) -> usize {
        self.map[i - 1]
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &v)| v == i + 1)
    }

    /// The inverse permutation; cyclic on the same observed set.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0usize; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v - 1] = i + 1;
        }
        CyclicPermutation { map: inv, observed: self.observed.clone() }
    }

    /// Reindex onto `{1..N}` where N = |observed|: entry `i` of the result is
    /// the observed-rank of `sigma(observed[i])`. Used to line a column's
    /// permutation up with a compacted list of that column's entries.
    pub fn compact(&self) -> Self {
        let rank = |view: usize| self.observed.iter().position(|&v| v == view).unwrap() + 1;
        let map: Vec<usize> = self.observed.iter().map(|&v| rank(self.apply(v))).collect();
        let n = map.len();
        CyclicPermutation { map, observed: (1..=n).collect() }
    }
}

fn normalize_observed(l: usize, observed: &[usize]) -> Result<Vec<usize>> {
    if observed.is_empty() {
        return Err(Error::contract("observed set is empty"));
    }
    let mut sorted = observed.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != observed.len() {
        return Err(Error::contract("observed set has duplicate indices"));
    }
    if sorted[0] < 1 || *sorted.last().unwrap() > l {
        return Err(Error::contract(format!("observed indices {sorted:?} outside 1..={l}")));
    }
    Ok(sorted)
}

fn check_bijection(map: &[usize]) -> Result<()> {
    let l = map.len();
    let mut seen = vec![false; l];
    for &v in map {
        if v < 1 || v > l || seen[v - 1] {
            return Err(Error::contract(format!("map {map:?} is not a bijection of 1..={l}")));
        }
        seen[v - 1] = true;
    }
    Ok(())
}

/// True iff `map` fixes every index outside `observed` and restricts to a
/// single cycle on `observed`. Errors if `map` is not a bijection.
pub fn is_cyclic(map: &[usize], observed: &[usize]) -> Result<bool> {
    check_bijection(map)?;
    let l = map.len();
    let in_observed = {
        let mut flags = vec![false; l + 1];
        for &v in observed {
            if v < 1 || v > l {
                return Err(Error::contract(format!("observed index {v} outside 1..={l}")));
            }
            flags[v] = true;
        }
        flags
    };
    for i in 1..=l {
        if !in_observed[i] && map[i - 1] != i {
            return Ok(false);
        }
    }
    let m = observed.len();
    if m == 0 {
        return Ok(true); // the identity on an empty observed set
    }
    // Walk the cycle from the smallest observed index; it must visit all m
    // observed elements before returning to the start.
    let start = *observed.iter().min().unwrap();
    let mut current = start;
    for step in 1..=m {
        current = map[current - 1];
        if !in_observed[current] {
            return Ok(false);
        }
        if current == start {
            return Ok(step == m);
        }
    }
    Ok(false)
}

/// Sattolo's algorithm with an injected swap-choice source. `choose(upper)`
/// must return a value in `1..=upper`; step `s` swaps positions `choose(n-s)`
/// and `n-s+1` (1-based). Exposed for exhaustive-enumeration tests.
pub fn sattolo_from_choices<F>(values: &mut [usize], mut choose: F)
where
    F: FnMut(usize) -> usize,
{
    let n = values.len();
    for step in 1..n {
        let upper = n - step;
        let k = choose(upper);
        debug_assert!((1..=upper).contains(&k));
        values.swap(k - 1, n - step);
    }
}

/// Uniformly random cyclic permutation of `{1..n}` (identity for n = 1).
pub fn sattolo(n: usize, rng: &mut Rng) -> Result<CyclicPermutation> {
    if n == 0 {
        return Err(Error::contract("sattolo needs n >= 1"));
    }
    let observed: Vec<usize> = (1..=n).collect();
    sattolo_with_fixed_points(n, &observed, rng)
}

/// Cyclic permutation on `observed` with every other index of `{1..L}` fixed.
pub fn sattolo_with_fixed_points(l: usize, observed: &[usize], rng: &mut Rng) -> Result<CyclicPermutation> {
    let observed = normalize_observed(l, observed)?;
    let mut values = observed.clone();
    sattolo_from_choices(&mut values, |upper| rng.below(upper) + 1);
    let mut map: Vec<usize> = (1..=l).collect();
    for (i, &v) in observed.iter().enumerate() {
        map[v - 1] = values[i];
    }
    Ok(CyclicPermutation { map, observed })
}

/// L independent cyclic permutations sharing one observed set, one per
/// target view (column) of the latent matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationBundle {
    columns: Vec<CyclicPermutation>,
}

impl PermutationBundle {
    /// Build from per-column permutations; all must share the observed set.
    pub fn new(columns: Vec<CyclicPermutation>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::contract("bundle needs at least one column"));
        }
        let observed = columns[0].observed().to_vec();
        for (l, c) in columns.iter().enumerate() {
            if c.observed() != observed.as_slice() {
                return Err(Error::contract(format!(
                    "bundle column {} has observed set {:?}, expected {:?}",
                    l + 1,
                    c.observed(),
                    observed
                )));
            }
        }
        Ok(PermutationBundle { columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn observed(&self) -> &[usize] {
        self.columns[0].observed()
    }

    /// Permutation for column `l` (1-based).
    pub fn column(&self, l: usize) -> &CyclicPermutation {
        &self.columns[l - 1]
    }

    pub fn columns(&self) -> &[CyclicPermutation] {
        &self.columns
    }

    pub fn inverse(&self) -> Self {
        PermutationBundle { columns: self.columns.iter().map(|c| c.inverse()).collect() }
    }

    /// Identity bundle on the given observed set.
    pub fn identity(l: usize, observed: &[usize]) -> Result<Self> {
        let observed = normalize_observed(l, observed)?;
        let map: Vec<usize> = (1..=l).collect();
        let column = CyclicPermutation::from_bijection(map, &observed)?;
        Ok(PermutationBundle { columns: vec![column; l] })
    }
}

/// Draw L independent cyclic permutations via [`sattolo_with_fixed_points`].
pub fn make_bundle(l: usize, observed: &[usize], rng: &mut Rng) -> Result<PermutationBundle> {
    let columns = (0..l)
        .map(|_| sattolo_with_fixed_points(l, observed, rng))
        .collect::<Result<Vec<_>>>()?;
    PermutationBundle::new(columns)
}

/// Uniformly random bijection bundle (Fisher–Yates on the observed set) for
/// the random-permutation ablation; columns may have fixed points.
pub fn make_random_bundle(l: usize, observed: &[usize], rng: &mut Rng) -> Result<PermutationBundle> {
    let observed = normalize_observed(l, observed)?;
    let columns = (0..l)
        .map(|_| {
            let mut values = observed.clone();
            rng.shuffle(&mut values);
            let mut map: Vec<usize> = (1..=l).collect();
            for (i, &v) in observed.iter().enumerate() {
                map[v - 1] = values[i];
            }
            CyclicPermutation::from_bijection(map, &observed)
        })
        .collect::<Result<Vec<_>>>()?;
    PermutationBundle::new(columns)
}
