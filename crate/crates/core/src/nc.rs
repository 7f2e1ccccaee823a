//! Non-crossing partitions, Kreweras complements, Catalan numbers and the
//! free-cumulant transform of subset-indexed tables.
//!
//! Ground sets are 0-based internally: `NC(k)` partitions `{0, .., k-1}`.
//! Subsets of the ground set are bitmasks.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use thiserror::Error;

/// Largest ground-set size accepted by [`enumerate_nc`].
pub const MAX_K: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NcError {
    #[error("ground-set size {k} outside 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("invalid partition: {0}")]
    InvalidPartition(&'static str),
    #[error("Catalan number C_{0} exceeds the supported range (n <= 30)")]
    CatalanOverflow(usize),
    #[error("table for k = {k} has no value for subset mask {mask:#b}")]
    IncompleteTable { k: usize, mask: u32 },
}

/// A non-crossing partition of `{0, .., k-1}`. Blocks are sorted internally
/// and ordered by their smallest element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NcPartition {
    k: usize,
    blocks: Vec<Vec<usize>>,
}

impl NcPartition {
    /// Validates and canonicalizes a list of blocks.
    pub fn from_blocks(k: usize, mut blocks: Vec<Vec<usize>>) -> Result<Self, NcError> {
        if k == 0 || k > 64 {
            return Err(NcError::KOutOfRange { k, max: 64 });
        }
        let mut seen = vec![false; k];
        for b in &mut blocks {
            if b.is_empty() {
                return Err(NcError::InvalidPartition("empty block"));
            }
            b.sort_unstable();
            for &i in b.iter() {
                if i >= k {
                    return Err(NcError::InvalidPartition("element out of range"));
                }
                if seen[i] {
                    return Err(NcError::InvalidPartition("blocks overlap"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(NcError::InvalidPartition("blocks do not cover the ground set"));
        }
        blocks.sort_unstable_by_key(|b| b[0]);
        let p = Self { k, blocks };
        if !p.is_noncrossing() {
            return Err(NcError::InvalidPartition("blocks cross"));
        }
        Ok(p)
    }

    pub fn singletons(k: usize) -> Self {
        Self {
            k,
            blocks: (0..k).map(|i| vec![i]).collect(),
        }
    }

    pub fn full(k: usize) -> Self {
        Self {
            k,
            blocks: vec![(0..k).collect()],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Number of blocks.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Block index of every element (a restricted growth string, since blocks
    /// are ordered by their minima).
    pub fn membership(&self) -> Vec<usize> {
        let mut m = vec![0; self.k];
        for (bi, b) in self.blocks.iter().enumerate() {
            for &i in b {
                m[i] = bi;
            }
        }
        m
    }

    /// The block containing `i`.
    pub fn block_of(&self, i: usize) -> &[usize] {
        self.blocks
            .iter()
            .find(|b| b.contains(&i))
            .map(|b| b.as_slice())
            .unwrap_or(&[])
    }

    /// Blocks as bitmasks.
    pub fn block_masks(&self) -> Vec<u64> {
        self.blocks
            .iter()
            .map(|b| b.iter().fold(0u64, |m, &i| m | (1 << i)))
            .collect()
    }

    pub fn is_noncrossing(&self) -> bool {
        let m = self.membership();
        let k = self.k;
        // a < b < c < d with a ~ c, b ~ d and a !~ b
        for a in 0..k {
            for b in a + 1..k {
                if m[a] == m[b] {
                    continue;
                }
                for c in b + 1..k {
                    if m[c] != m[a] {
                        continue;
                    }
                    if (c + 1..k).any(|d| m[d] == m[b]) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// All non-crossing partitions of `{0, .., k-1}`, ordered lexicographically by
/// their membership vectors.
pub fn enumerate_nc(k: usize) -> Result<Vec<NcPartition>, NcError> {
    if k == 0 || k > MAX_K {
        return Err(NcError::KOutOfRange { k, max: MAX_K });
    }
    let elems: Vec<usize> = (0..k).collect();
    let mut out: Vec<NcPartition> = nc_of(&elems)
        .into_iter()
        .map(|mut blocks| {
            for b in &mut blocks {
                b.sort_unstable();
            }
            blocks.sort_unstable_by_key(|b| b[0]);
            NcPartition { k, blocks }
        })
        .collect();
    out.sort_by_cached_key(NcPartition::membership);
    Ok(out)
}

/// Non-crossing partitions of an ordered list. The block of the first
/// element, with largest member `s[j]`, corresponds to a partition of
/// `s[1..=j]` whose block containing `s[j]` absorbs `s[0]`; the remaining
/// elements `s[j+1..]` are partitioned independently.
fn nc_of(s: &[usize]) -> Vec<Vec<Vec<usize>>> {
    if s.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for j in 0..s.len() {
        let rest = nc_of(&s[j + 1..]);
        let inner = if j == 0 {
            vec![Vec::new()]
        } else {
            nc_of(&s[1..=j])
        };
        for inner_p in &inner {
            let mut head: Vec<Vec<usize>> = inner_p.clone();
            match head.iter_mut().find(|b| b.contains(&s[j])) {
                Some(b) => b.push(s[0]),
                None => head.push(vec![s[0]]),
            }
            for r in &rest {
                let mut p = head.clone();
                p.extend(r.iter().cloned());
                out.push(p);
            }
        }
    }
    out
}

/// Kreweras complement, with the barred element `i'` (sitting between `i`
/// and `i+1` on the cycle) relabeled as `i`.
///
/// Computed as the cycles of `P^{-1} ∘ γ`, where `P` maps every element to
/// its successor in its block (cyclically) and `γ(i) = i + 1 mod k`.
pub fn kreweras(pi: &NcPartition) -> NcPartition {
    let k = pi.k;
    let mut pinv = vec![0usize; k];
    for b in &pi.blocks {
        for (idx, &e) in b.iter().enumerate() {
            let next = b[(idx + 1) % b.len()];
            pinv[next] = e;
        }
    }
    let mut visited = vec![false; k];
    let mut blocks = Vec::new();
    for start in 0..k {
        if visited[start] {
            continue;
        }
        let mut cycle = Vec::new();
        let mut i = start;
        while !visited[i] {
            visited[i] = true;
            cycle.push(i);
            i = pinv[(i + 1) % k];
        }
        cycle.sort_unstable();
        blocks.push(cycle);
    }
    blocks.sort_unstable_by_key(|b| b[0]);
    NcPartition { k, blocks }
}

/// Exact Catalan number `C_n` for `n <= 30`.
pub fn catalan(n: usize) -> Result<u64, NcError> {
    if n > 30 {
        return Err(NcError::CatalanOverflow(n));
    }
    let mut c: u128 = 1;
    for i in 0..n as u128 {
        c = c * 2 * (2 * i + 1) / (i + 2);
    }
    Ok(c as u64)
}

/// Complex values indexed by nonempty subsets of `{0, .., k-1}` (bitmasks).
#[derive(Debug, Clone, PartialEq)]
pub struct CumulantTable {
    k: usize,
    values: Vec<Option<Complex64>>,
}

impl CumulantTable {
    pub fn new(k: usize) -> Result<Self, NcError> {
        if k == 0 || k > MAX_K {
            return Err(NcError::KOutOfRange { k, max: MAX_K });
        }
        Ok(Self {
            k,
            values: vec![None; 1 << k],
        })
    }

    /// Fills every nonempty subset from `f(mask)`.
    pub fn try_from_fn<E, F>(k: usize, mut f: F) -> Result<Result<Self, E>, NcError>
    where
        F: FnMut(u32) -> Result<Complex64, E>,
    {
        let mut t = Self::new(k)?;
        for mask in 1..(1u32 << k) {
            match f(mask) {
                Ok(v) => t.values[mask as usize] = Some(v),
                Err(e) => return Ok(Err(e)),
            }
        }
        Ok(Ok(t))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, mask: u32) -> Option<Complex64> {
        self.values.get(mask as usize).copied().flatten()
    }

    pub fn set(&mut self, mask: u32, value: Complex64) {
        assert!(mask != 0 && (mask as usize) < self.values.len(), "subset mask out of range");
        self.values[mask as usize] = Some(value);
    }

    fn require(&self, mask: u32) -> Result<Complex64, NcError> {
        self.get(mask).ok_or(NcError::IncompleteTable { k: self.k, mask })
    }

    fn check_complete(&self) -> Result<(), NcError> {
        for mask in 1..(1u32 << self.k) {
            self.require(mask)?;
        }
        Ok(())
    }
}

/// Non-crossing partitions of `{0, .., s-1}` as lists of block masks, for
/// `s = 0..=k`.
struct LocalPartitions {
    by_size: Vec<Vec<Vec<u32>>>,
}

impl LocalPartitions {
    fn new(k: usize) -> Result<Self, NcError> {
        let mut by_size = vec![vec![Vec::new()]];
        for s in 1..=k {
            let ps = enumerate_nc(s)?;
            by_size.push(
                ps.iter()
                    .map(|p| p.block_masks().into_iter().map(|m| m as u32).collect())
                    .collect(),
            );
        }
        Ok(Self { by_size })
    }
}

/// Positions of the set bits of `mask`, in increasing order.
fn members(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

/// Maps a mask over local positions `0..members.len()` to a global mask.
fn lift(local: u32, members: &[usize]) -> u32 {
    let mut g = 0;
    for (pos, &e) in members.iter().enumerate() {
        if local & (1 << pos) != 0 {
            g |= 1 << e;
        }
    }
    g
}

fn masks_by_popcount(k: usize) -> Vec<u32> {
    let mut masks: Vec<u32> = (1..(1u32 << k)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    masks
}

/// Free cumulants `m_∘[S]` of a complete moment table, defined by
/// `m[S] = Σ_{π ∈ NC(S)} ∏_{U ∈ π} m_∘[U]` and computed by recursive
/// subtraction in increasing subset size.
pub fn free_cumulants(moments: &CumulantTable) -> Result<CumulantTable, NcError> {
    moments.check_complete()?;
    let k = moments.k;
    let local = LocalPartitions::new(k)?;
    let mut out = CumulantTable::new(k)?;
    for mask in masks_by_popcount(k) {
        let mem = members(mask);
        let mut acc = moments.require(mask)?;
        for p in &local.by_size[mem.len()] {
            if p.len() == 1 {
                continue;
            }
            let mut prod = Complex64::new(1.0, 0.0);
            for &b in p {
                prod *= out.require(lift(b, &mem))?;
            }
            acc -= prod;
        }
        out.values[mask as usize] = Some(acc);
    }
    Ok(out)
}

/// Free cumulants via the explicit inversion
/// `m_∘[S] = m[S] + Σ_{π ∈ NC(S), |π| >= 2} (-1)^{|π|-1} ∏_{T ∈ K(π)} C_{|T|-1} ∏_{U ∈ π} m[U]`.
pub fn free_cumulants_mobius(moments: &CumulantTable) -> Result<CumulantTable, NcError> {
    moments.check_complete()?;
    let k = moments.k;
    let mut out = CumulantTable::new(k)?;
    let mut weights: Vec<Vec<(f64, Vec<u32>)>> = vec![Vec::new()];
    for s in 1..=k {
        let mut ws = Vec::new();
        for p in enumerate_nc(s)? {
            if p.len() < 2 {
                continue;
            }
            let mut w: f64 = if p.len() % 2 == 0 { -1.0 } else { 1.0 };
            for t in kreweras(&p).blocks() {
                w *= catalan(t.len() - 1)? as f64;
            }
            ws.push((w, p.block_masks().into_iter().map(|m| m as u32).collect()));
        }
        weights.push(ws);
    }
    for mask in 1..(1u32 << k) {
        let mem = members(mask);
        let mut acc = moments.require(mask)?;
        for (w, blocks) in &weights[mem.len()] {
            let mut prod = Complex64::new(*w, 0.0);
            for &b in blocks {
                prod *= moments.require(lift(b, &mem))?;
            }
            acc += prod;
        }
        out.values[mask as usize] = Some(acc);
    }
    Ok(out)
}

/// Inverse of [`free_cumulants`]: `m[S] = Σ_{π ∈ NC(S)} ∏_{U ∈ π} m_∘[U]`.
pub fn moments_from_cumulants(cumulants: &CumulantTable) -> Result<CumulantTable, NcError> {
    cumulants.check_complete()?;
    let k = cumulants.k;
    let local = LocalPartitions::new(k)?;
    let mut out = CumulantTable::new(k)?;
    for mask in 1..(1u32 << k) {
        let mem = members(mask);
        let mut acc = Complex64::new(0.0, 0.0);
        for p in &local.by_size[mem.len()] {
            let mut prod = Complex64::new(1.0, 0.0);
            for &b in p {
                prod *= cumulants.require(lift(b, &mem))?;
            }
            acc += prod;
        }
        out.values[mask as usize] = Some(acc);
    }
    Ok(out)
}
