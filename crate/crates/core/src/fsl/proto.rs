use crate::error::{ensure, Result};
use crate::losses::cross_entropy;
use crate::nn::{EmbeddingNetwork, GradientVector};
use crate::spectro::SpectrogramImage;
use crate::Scalar;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Borrowed images with their labels.
#[derive(Debug, Clone, Default)]
pub struct Dataset<'a> {
    pub images: Vec<&'a SpectrogramImage>,
    pub labels: Vec<u8>,
}

impl<'a> Dataset<'a> {
    pub fn new(images: Vec<&'a SpectrogramImage>, labels: Vec<u8>) -> Result<Self> {
        ensure!(images.len() == labels.len(), "{} images vs {} labels", images.len(), labels.len());
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample indices per class, ascending.
    pub fn by_class(&self) -> BTreeMap<u8, Vec<usize>> {
        let mut out: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    pub fn classes(&self) -> Vec<u8> {
        self.by_class().into_keys().collect()
    }

    pub fn filter_classes(&self, keep: &[u8]) -> Dataset<'a> {
        let (images, labels) = self
            .images
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| keep.contains(l))
            .map(|(i, &l)| (*i, l))
            .unzip();
        Dataset { images, labels }
    }

    pub fn concat(&self, other: &Dataset<'a>) -> Dataset<'a> {
        let mut out = self.clone();
        out.images.extend(&other.images);
        out.labels.extend(&other.labels);
        out
    }
}

/// Support and query indices into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub ways: Vec<u8>,
    /// `support[w]` holds the samples of class `ways[w]`.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        ensure!(self.ways.len() >= 2, "episode needs at least two ways");
        ensure!(self.support.len() == self.ways.len(), "support lists must match ways");
        ensure!(!self.query.is_empty(), "episode needs queries");
        for (w, s) in self.ways.iter().zip(&self.support) {
            ensure!(!s.is_empty(), "class {w} has no support");
            ensure!(s.iter().all(|&i| i < data.len() && data.labels[i] == *w), "support of class {w} is mislabelled");
        }
        for &q in &self.query {
            ensure!(q < data.len(), "query index {q} out of range");
            ensure!(self.ways.contains(&data.labels[q]), "query label {} missing from support", data.labels[q]);
        }
        Ok(())
    }

    /// `n_way` classes with at least two samples; per class `k_shot` support and up to
    /// `n_query` queries, shrinking support so each class keeps at least one query.
    pub fn sample<R: Rng>(
        data: &Dataset,
        classes: &[u8],
        n_way: usize,
        k_shot: usize,
        n_query: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(k_shot >= 1 && n_query >= 1, "k_shot and n_query must be positive");
        let by_class = data.by_class();
        let eligible: Vec<u8> =
            classes.iter().copied().filter(|c| by_class.get(c).is_some_and(|v| v.len() >= 2)).collect();
        ensure!(eligible.len() >= 2, "episodes need two classes with at least two samples");
        let mut ways: Vec<u8> = eligible.choose_multiple(rng, n_way.min(eligible.len())).copied().collect();
        ways.sort_unstable();
        let mut support = Vec::with_capacity(ways.len());
        let mut query = Vec::new();
        for w in &ways {
            let mut idx = by_class[w].clone();
            idx.shuffle(rng);
            let k = k_shot.min(idx.len() - 1);
            support.push(idx[..k].to_vec());
            query.extend(idx[k..].iter().take(n_query));
        }
        Ok(Self { ways, support, query })
    }
}

/// Class means of embedding vectors, classified by Euclidean distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier {
    pub prototypes: BTreeMap<u8, Vec<f64>>,
}

impl PrototypeClassifier {
    pub fn from_embeddings(embeddings: &[Vec<f64>], labels: &[u8]) -> Result<Self> {
        ensure!(embeddings.len() == labels.len(), "embeddings and labels misaligned");
        ensure!(!labels.is_empty(), "support set is empty");
        let dim = embeddings[0].len();
        let mut sums: BTreeMap<u8, (Vec<f64>, usize)> = BTreeMap::new();
        for (e, &l) in embeddings.iter().zip(labels) {
            ensure!(e.len() == dim, "embedding dims differ");
            let (s, n) = sums.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
            for (a, b) in s.iter_mut().zip(e) {
                *a += b;
            }
            *n += 1;
        }
        let prototypes = sums.into_iter().map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect())).collect();
        Ok(Self { prototypes })
    }

    pub fn embed_dim(&self) -> usize {
        self.prototypes.values().next().map_or(0, Vec::len)
    }

    pub fn classes(&self) -> Vec<u8> {
        self.prototypes.keys().copied().collect()
    }

    /// Nearest prototype; ties go to the smaller class id.
    pub fn classify_embedding(&self, e: &[f64]) -> (u8, BTreeMap<u8, f64>) {
        let dists: BTreeMap<u8, f64> = self
            .prototypes
            .iter()
            .map(|(&c, p)| (c, p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
            .collect();
        let mut best = (u8::MAX, f64::INFINITY);
        for (&c, &d) in &dists {
            if d < best.1 {
                best = (c, d);
            }
        }
        (best.0, dists)
    }

    pub fn classify<T: Scalar>(&self, net: &EmbeddingNetwork<T>, image: &SpectrogramImage) -> Result<(u8, BTreeMap<u8, f64>)> {
        let e = embed_f64(net, &[image])?;
        Ok(self.classify_embedding(&e[0]))
    }

    pub fn predict<T: Scalar>(&self, net: &EmbeddingNetwork<T>, images: &[&SpectrogramImage]) -> Result<Vec<u8>> {
        Ok(embed_f64(net, images)?.iter().map(|e| self.classify_embedding(e).0).collect())
    }
}

const EMBED_CHUNK: usize = 64;

/// Raw embeddings in f64, computed in fixed-size chunks.
pub fn embed_f64<T: Scalar>(net: &EmbeddingNetwork<T>, images: &[&SpectrogramImage]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        out.extend(net.embed(chunk)?.into_iter().map(|e| e.into_iter().map(Scalar::f64).collect::<Vec<f64>>()));
    }
    Ok(out)
}

/// Prototypes of every class in `support`.
pub fn compute_prototypes<T: Scalar>(net: &EmbeddingNetwork<T>, support: &Dataset) -> Result<PrototypeClassifier> {
    ensure!(!support.is_empty(), "support set is empty");
    PrototypeClassifier::from_embeddings(&embed_f64(net, &support.images)?, &support.labels)
}

/// Mean cross-entropy over queries of logits `-||q - p_w||²`, where `p_w`
/// is the mean of rows `support[w]`. `query` pairs a row with its way index.
/// Returns the loss and its gradient for every row of `emb`.
pub fn prototype_loss<T: Scalar>(
    emb: &[Vec<T>],
    support: &[Vec<usize>],
    query: &[(usize, usize)],
) -> Result<(T, Vec<Vec<T>>)> {
    ensure!(!emb.is_empty() && !query.is_empty(), "prototype loss needs rows and queries");
    let dim = emb[0].len();
    let protos: Vec<Vec<T>> = support
        .iter()
        .map(|rows| {
            let mut p = vec![T::zero(); dim];
            for &r in rows {
                for (a, &b) in p.iter_mut().zip(&emb[r]) {
                    *a += b;
                }
            }
            let n = T::of(rows.len() as f64);
            p.into_iter().map(|v| v / n).collect()
        })
        .collect();
    ensure!(support.iter().all(|s| !s.is_empty()), "empty support list");
    let mut grad = vec![vec![T::zero(); dim]; emb.len()];
    let mut d_protos = vec![vec![T::zero(); dim]; protos.len()];
    let scale = T::one() / T::of(query.len() as f64);
    let two = T::of(2.0);
    let mut total = T::zero();
    for &(row, way) in query {
        ensure!(way < protos.len(), "query way {way} out of range");
        let q = &emb[row];
        let logits: Vec<T> = protos
            .iter()
            .map(|p| -q.iter().zip(p).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>())
            .collect();
        let (loss, dlogit) = cross_entropy(&logits, way)?;
        total += loss * scale;
        for (w, p) in protos.iter().enumerate() {
            let g = dlogit[w] * scale;
            for d in 0..dim {
                let diff = q[d] - p[d];
                grad[row][d] -= g * two * diff;
                d_protos[w][d] += g * two * diff;
            }
        }
    }
    for (rows, dp) in support.iter().zip(&d_protos) {
        let n = T::of(rows.len() as f64);
        for &r in rows {
            for (a, &b) in grad[r].iter_mut().zip(dp) {
                *a += b / n;
            }
        }
    }
    Ok((total, grad))
}

/// Rows of an episode batch: support rows first, then query rows.
pub(crate) fn episode_rows(ep: &Episode) -> (Vec<usize>, Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let mut order = Vec::new();
    let mut support = Vec::new();
    for s in &ep.support {
        support.push((order.len()..order.len() + s.len()).collect());
        order.extend(s);
    }
    let query = ep
        .query
        .iter()
        .map(|&q| {
            let row = order.len();
            order.push(q);
            (row, q)
        })
        .collect::<Vec<_>>();
    (order, support, query)
}

/// Prototypical-network loss of one episode and its parameter gradient.
pub fn pn_episode_loss<T: Scalar>(net: &EmbeddingNetwork<T>, data: &Dataset, ep: &Episode) -> Result<(T, GradientVector<T>)> {
    ep.validate(data)?;
    let (order, support, query_src) = episode_rows(ep);
    let query: Vec<(usize, usize)> = query_src
        .into_iter()
        .map(|(row, q)| (row, ep.ways.iter().position(|&w| w == data.labels[q]).unwrap()))
        .collect();
    let images: Vec<&SpectrogramImage> = order.iter().map(|&i| data.images[i]).collect();
    let fwd = net.forward(&images)?;
    let (loss, d_emb) = prototype_loss(&fwd.embeddings, &support, &query)?;
    let grad = net.backward(&fwd, &d_emb, None)?;
    Ok((loss, grad))
}
