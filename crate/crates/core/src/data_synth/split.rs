use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ProductRecord;
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.2, 0.1];

/// Train / validation / test partitions of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<ProductRecord>,
    pub validation: Vec<ProductRecord>,
    pub test: Vec<ProductRecord>,
}

/// Largest-remainder apportionment of `n` items under `ratios`.
/// Ties in the fractional part go to the earlier split.
pub fn split_sizes(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        // Tolerate representation error such as 0.7 * 10 = 6.999999999999999.
        *s = (e + 1e-9).floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffles product-level under `seed` and cuts into three disjoint parts.
pub fn split(records: &[ProductRecord], ratios: [f64; 3], seed: u64) -> Result<Splits> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::contract(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let sizes = split_sizes(records.len(), &ratios);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| -> Vec<ProductRecord> {
        let mut part: Vec<usize> = idx[range].to_vec();
        part.sort_unstable();
        part.into_iter().map(|i| records[i].clone()).collect()
    };
    let a = sizes[0];
    let b = a + sizes[1];
    Ok(Splits {
        train: take(0..a),
        validation: take(a..b),
        test: take(b..records.len()),
    })
}

/// Number of records kept by [`subsample_fewshot`]: `ceil(fraction · n)`, at least one.
pub fn fewshot_size(n: usize, fraction: f64) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n)
}

/// Uniform product-level sample of `ceil(fraction · |train|)` records, in input order.
pub fn subsample_fewshot(
    train: &[ProductRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ProductRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "few-shot fraction {fraction} must lie in (0, 1]"
        )));
    }
    let k = fewshot_size(train.len(), fraction);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xF3_5407));
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| train[i].clone()).collect())
}
