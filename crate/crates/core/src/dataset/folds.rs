use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MultiYearParcel;
use crate::error::{Error, Result};

/// Parcel-wise fold membership. All years of a parcel share its fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldAssignment {
    pub k: usize,
    pub block_size: f64,
    pub seed: u64,
    pub folds: BTreeMap<u64, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, parcel_id: u64) -> Option<usize> {
        self.folds.get(&parcel_id).copied()
    }

    /// Parcel ids of one fold, ascending.
    pub fn members(&self, fold: usize) -> Vec<u64> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("fold count must be at least 2".into()));
        }
        if let Some((id, f)) = self.folds.iter().find(|(_, &f)| f >= self.k) {
            return Err(Error::Config(format!("parcel {id} assigned to fold {f} >= k")));
        }
        Ok(())
    }
}

/// Grid block containing a centroid.
pub fn block_of(centroid: (f64, f64), block_size: f64) -> (i64, i64) {
    (
        (centroid.0 / block_size).floor() as i64,
        (centroid.1 / block_size).floor() as i64,
    )
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of integers into one well-mixed seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn block_hash(block: (i64, i64), seed: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ block.0 as u64) ^ block.1 as u64)
}

/// Spatially separated folds: centroids are bucketed into square blocks of
/// `block_size` meters, blocks are ordered by a seeded hash and dealt to the
/// folds round-robin.
pub fn make_folds(
    parcels: &[MultiYearParcel],
    k: usize,
    block_size: f64,
    seed: u64,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config("fold count must be at least 2".into()));
    }
    if !(block_size.is_finite() && block_size > 0.0) {
        return Err(Error::Config("block size must be positive".into()));
    }
    let blocks: BTreeSet<(i64, i64)> = parcels
        .iter()
        .map(|p| block_of(p.centroid, block_size))
        .collect();
    if k > blocks.len() {
        return Err(Error::Infeasible(format!(
            "{k} folds requested but parcels occupy only {} blocks",
            blocks.len()
        )));
    }
    let mut order: Vec<(u64, (i64, i64))> =
        blocks.into_iter().map(|b| (block_hash(b, seed), b)).collect();
    order.sort_unstable();
    let block_fold: BTreeMap<(i64, i64), usize> = order
        .into_iter()
        .enumerate()
        .map(|(i, (_, b))| (b, i % k))
        .collect();
    let folds = parcels
        .iter()
        .map(|p| (p.parcel_id, block_fold[&block_of(p.centroid, block_size)]))
        .collect();
    Ok(FoldAssignment {
        k,
        block_size,
        seed,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};

    fn bare(id: u64, x: f64, y: f64) -> MultiYearParcel {
        MultiYearParcel {
            parcel_id: id,
            centroid: (x, y),
            years: vec![],
        }
    }

    #[test]
    fn same_block_same_fold() {
        let parcels = vec![bare(1, 10.0, 10.0), bare(2, 90.0, 50.0), bare(3, 510.0, 10.0), bare(4, 1010.0, 10.0)];
        let f = make_folds(&parcels, 2, 100.0, 0).unwrap();
        assert_eq!(f.fold_of(1), f.fold_of(2));
    }

    #[test]
    fn too_many_folds_is_infeasible() {
        let parcels = vec![bare(1, 1.0, 1.0), bare(2, 2.0, 2.0)];
        assert!(matches!(make_folds(&parcels, 2, 100.0, 0), Err(Error::Infeasible(_))));
        assert!(matches!(make_folds(&parcels, 1, 100.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_and_balance() {
        let mut cfg = SyntheticConfig::desk(1000, 17);
        cfg.min_pixels = 1;
        cfg.max_pixels = 1;
        let ds = generate_synthetic(&cfg).unwrap();
        let f = make_folds(&ds.parcels, 5, 1000.0, 3).unwrap();
        assert_eq!(f.folds.len(), 1000);
        let mut union: Vec<u64> = (0..5).flat_map(|i| f.members(i)).collect();
        union.sort();
        let all: Vec<u64> = ds.parcels.iter().map(|p| p.parcel_id).collect();
        assert_eq!(union, all);
        for s in f.sizes() {
            assert!((100..=300).contains(&s), "fold size {s}");
        }
        let max = *f.sizes().iter().max().unwrap() as f64;
        let min = *f.sizes().iter().min().unwrap() as f64;
        assert!(max <= 2.0 * min);
        // no block spans two folds
        let mut seen = BTreeMap::new();
        for p in &ds.parcels {
            let b = block_of(p.centroid, 1000.0);
            let fold = f.fold_of(p.parcel_id).unwrap();
            assert_eq!(*seen.entry(b).or_insert(fold), fold);
        }
    }
}
