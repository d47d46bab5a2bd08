use crate::error::{ensure, Result};
use crate::seed::stream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.64, 0.16, 0.20];

/// Per-split counts for a class of `n` samples by largest remainder.
///
/// Classes with at least three samples give every split with a positive fraction
/// at least one sample, taken from the currently largest split. Smaller classes
/// keep all but one sample in train; the remaining one goes to test when test
/// has a positive fraction, otherwise to val.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let positive: Vec<usize> = (0..3).filter(|&i| fractions[i] > 0.0).collect();
    if n < 3 && positive.len() > 1 {
        let mut out = [0; 3];
        if n == 0 {
            return out;
        }
        out[0] = n - 1;
        let other = if fractions[2] > 0.0 { 2 } else { 1 };
        out[if n == 1 { 0 } else { other }] += 1;
        return out;
    }
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut out: [usize; 3] = [raw[0].floor() as usize, raw[1].floor() as usize, raw[2].floor() as usize];
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            out[i] += 1;
            left -= 1;
        }
    }
    for &i in &positive {
        if out[i] == 0 {
            let donor = (0..3).max_by(|&a, &b| out[a].cmp(&out[b]).then(b.cmp(&a))).unwrap();
            out[donor] -= 1;
            out[i] += 1;
        }
    }
    out
}

/// Stratified split: each class is shuffled with its own seeded stream, then
/// cut into train/val/test according to [`split_counts`].
pub fn split_corpus(labels: &[u8], fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    ensure!(fractions.iter().all(|f| (0.0..=1.0).contains(f)), "split fractions must lie in [0, 1]");
    ensure!(
        (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9,
        "split fractions must sum to 1, got {fractions:?}"
    );
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out = vec![Split::Train; labels.len()];
    for (class, mut idx) in by_class {
        idx.shuffle(&mut stream(seed, class as u64));
        let counts = split_counts(idx.len(), fractions);
        let mut pos = 0;
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for &i in &idx[pos..pos + count] {
                out[i] = split;
            }
            pos += count;
        }
    }
    Ok(out)
}
