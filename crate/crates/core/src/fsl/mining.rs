use super::proto::{Dataset, PrototypeClassifier};
use crate::error::{ensure, Error, Result};
use crate::uncertainty::{decompose_uncertainty, Ensemble};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const PAPER_FIXTURE: &str = include_str!("../../data/paper_similarity_map.json");

pub const DEFAULT_MINING_QUANTILE: f64 = 0.75;
/// Epistemic traces at or below this never enter a map.
pub const DEFAULT_EPISTEMIC_FLOOR: f64 = 1e-4;

/// For each anchor class, the confusable classes in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityMap {
    pub entries: BTreeMap<u8, Vec<u8>>,
}

impl SimilarityMap {
    /// The class combinations observed on the reference recordings.
    pub fn paper_fixture() -> Self {
        Self::from_json(PAPER_FIXTURE).expect("bundled similarity map is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: SimilarityMap = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (c, list) in &self.entries {
            ensure!(!list.contains(c), "class {c} lists itself as similar");
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            ensure!(seen.len() == list.len(), "class {c} lists a similar class twice");
        }
        Ok(())
    }

    pub fn get(&self, class: u8) -> &[u8] {
        self.entries.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Drops classes outside `keep`, both as keys and as entries.
    pub fn restrict_to(&self, keep: &[u8]) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|(c, _)| keep.contains(c))
            .map(|(&c, l)| (c, l.iter().copied().filter(|x| keep.contains(x)).collect()))
            .collect();
        Self { entries }
    }
}

/// Mean epistemic trace per (true, confused) class pair.
///
/// A sample of true class `c` whose ensemble-mean prediction ranks `c'` among
/// its top two contributes its epistemic trace to cell `(c, c')`.
pub fn confusion_uncertainty(ensemble: &Ensemble, data: &Dataset) -> Result<BTreeMap<(u8, u8), f64>> {
    let mut cells: BTreeMap<(u8, u8), Vec<f64>> = BTreeMap::new();
    let preds = ensemble.predict_batch(&data.images)?;
    for (softmax, &label) in preds.iter().zip(&data.labels) {
        let report = decompose_uncertainty(softmax)?;
        let mut ranked: Vec<usize> = (0..report.num_classes).collect();
        ranked.sort_by(|&a, &b| report.mean_softmax[b].total_cmp(&report.mean_softmax[a]).then(a.cmp(&b)));
        for &other in ranked.iter().take(2) {
            if other != label as usize {
                cells.entry((label, other as u8)).or_default().push(report.epistemic_trace());
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            (k, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect())
}

/// Keeps pairs whose statistic exceeds both the `quantile` of all cell
/// statistics and `floor`; entries are ranked by statistic, ties by class id.
pub fn similarity_from_cells(cells: &BTreeMap<(u8, u8), f64>, quantile: f64, floor: f64) -> Result<SimilarityMap> {
    ensure!((0.0..=1.0).contains(&quantile), "quantile must lie in [0, 1]");
    let mut stats: Vec<f64> = cells.values().copied().collect();
    stats.sort_by(f64::total_cmp);
    let threshold = if stats.is_empty() {
        f64::INFINITY
    } else {
        let pos = quantile * (stats.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        stats[lo] + (stats[hi] - stats[lo]) * (pos - lo as f64)
    };
    let cut = threshold.max(floor);
    let mut ranked: BTreeMap<u8, Vec<(f64, u8)>> = BTreeMap::new();
    for (&(c, other), &v) in cells {
        if v >= cut && v > floor {
            ranked.entry(c).or_default().push((v, other));
        }
    }
    let entries = ranked
        .into_iter()
        .map(|(c, mut v)| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            (c, v.into_iter().map(|(_, o)| o).collect())
        })
        .collect();
    Ok(SimilarityMap { entries })
}

/// Mines the similarity map from ensemble disagreement on labelled data.
pub fn build_similarity_map(ensemble: &Ensemble, data: &Dataset, quantile: f64, floor: f64) -> Result<SimilarityMap> {
    ensure!(ensemble.is_trained(), "similarity mining needs a trained ensemble");
    let present = data.classes();
    for c in 0..ensemble.num_classes() as u8 {
        if !present.contains(&c) {
            log::warn!("class {c} absent from mining data; excluded from the similarity map");
        }
    }
    similarity_from_cells(&confusion_uncertainty(ensemble, data)?, quantile, floor)
}

/// Anchor, positive, similar and negative sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quadruplet {
    pub anchor: usize,
    pub positive: usize,
    pub similar: usize,
    pub negative: usize,
}

/// Draws quadruplets from a labelled dataset guided by a similarity map.
#[derive(Debug, Clone)]
pub struct QuadrupletSampler {
    by_class: BTreeMap<u8, Vec<usize>>,
    labels: Vec<u8>,
    map: SimilarityMap,
    fallback: BTreeMap<u8, u8>,
}

impl QuadrupletSampler {
    pub fn new(data: &Dataset, map: &SimilarityMap) -> Result<Self> {
        let by_class = data.by_class();
        ensure!(by_class.len() >= 3, "quadruplets need at least three classes, got {}", by_class.len());
        let classes: Vec<u8> = by_class.keys().copied().collect();
        Ok(Self { by_class, labels: data.labels.clone(), map: map.restrict_to(&classes), fallback: BTreeMap::new() })
    }

    /// Classes usable as anchors (at least two samples).
    pub fn anchor_classes(&self) -> Vec<u8> {
        self.by_class.iter().filter(|(_, v)| v.len() >= 2).map(|(&c, _)| c).collect()
    }

    /// Nearest other-class prototype per class, used when a map entry is empty.
    pub fn set_fallback_from(&mut self, prototypes: &PrototypeClassifier) {
        self.fallback.clear();
        for (&c, p) in &prototypes.prototypes {
            let mut best: Option<(f64, u8)> = None;
            for (&o, q) in &prototypes.prototypes {
                if o == c || !self.by_class.contains_key(&o) {
                    continue;
                }
                let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, o));
                }
            }
            if let Some((_, o)) = best {
                self.fallback.insert(c, o);
            }
        }
    }

    pub fn map(&self) -> &SimilarityMap {
        &self.map
    }

    fn pick<R: Rng>(&self, class: u8, rng: &mut R) -> usize {
        *self.by_class[&class].choose(rng).expect("non-empty class")
    }

    /// Class of the similar sample for `anchor`: uniform over the map entry,
    /// else the fallback class, else uniform over the other classes.
    pub fn similar_class<R: Rng>(&self, anchor: u8, rng: &mut R) -> u8 {
        let entry = self.map.get(anchor);
        if let Some(&c) = entry.choose(rng) {
            return c;
        }
        if let Some(&c) = self.fallback.get(&anchor) {
            return c;
        }
        let others: Vec<u8> = self.by_class.keys().copied().filter(|&c| c != anchor).collect();
        *others.choose(rng).expect("at least three classes")
    }

    pub fn sample_quadruplet<R: Rng>(&self, anchor_class: u8, rng: &mut R) -> Result<Quadruplet> {
        let members = self
            .by_class
            .get(&anchor_class)
            .ok_or_else(|| Error::invalid(format!("anchor class {anchor_class} not in dataset")))?;
        ensure!(members.len() >= 2, "anchor class {anchor_class} needs two samples");
        let pair: Vec<&usize> = members.choose_multiple(rng, 2).collect();
        let (anchor, positive) = (*pair[0], *pair[1]);
        let s_class = self.similar_class(anchor_class, rng);
        let similar = self.pick(s_class, rng);
        let neg_classes: Vec<u8> =
            self.by_class.keys().copied().filter(|&c| c != anchor_class && c != s_class).collect();
        let n_class = *neg_classes.choose(rng).expect("at least three classes");
        let negative = self.pick(n_class, rng);
        Ok(Quadruplet { anchor, positive, similar, negative })
    }

    /// Anchor class drawn uniformly from [`Self::anchor_classes`].
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Quadruplet> {
        let anchors = self.anchor_classes();
        let &c = anchors.choose(rng).ok_or_else(|| Error::invalid("no class has two samples"))?;
        self.sample_quadruplet(c, rng)
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }
}
