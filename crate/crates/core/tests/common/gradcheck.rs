//! Finite-difference oracle for every analytic gradient in the crate.
//!
//! Each check draws random instances, differentiates a scalar objective by
//! central differences and compares against the analytic gradient. A
//! coordinate whose estimates at `EPS` and `EPS / 2` disagree has a ReLU,
//! max-pool or hinge kink inside the stencil and is skipped.

use gnss_fsl::fsl::{pn_episode_loss, prototype_loss, Dataset, Episode};
use gnss_fsl::losses::{contrastive_loss, cross_entropy, quadruplet_loss, triplet_loss, LossOutput, PairBatch};
use gnss_fsl::nn::{AdaptationHead, ArchConfig, EmbeddingNetwork};
use gnss_fsl::seed::stream;
use gnss_fsl::spectro::SpectrogramImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

impl GradReport {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), instances: 0, checked: 0, skipped: 0, max_rel: 0.0 }
    }

    pub fn passed(&self, min_instances: usize) -> bool {
        self.instances >= min_instances && self.max_rel < TOLERANCE && self.skipped * 10 <= self.checked
    }

    /// Compares `analytic` with the numeric gradient of `f` at `x`, coordinates `coords`.
    fn check(&mut self, f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: impl Iterator<Item = usize>) {
        for i in coords {
            let at = |eps: f64| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            };
            let coarse = at(EPS);
            let fine = at(EPS / 2.0);
            if (coarse - fine).abs() > 1e-7 * coarse.abs().max(1.0) {
                self.skipped += 1;
                continue;
            }
            let rel = (analytic[i] - fine).abs() / analytic[i].abs().max(fine.abs()).max(REL_FLOOR);
            self.max_rel = self.max_rel.max(rel);
            self.checked += 1;
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rows(flat: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect()
}

/// Batch layout in the flat vector: anchors, positives, negatives, similars.
fn unpack(flat: &[f64], n: usize, d: usize, quad: bool) -> PairBatch<f64> {
    let block = n * d;
    PairBatch {
        anchors: rows(&flat[..block], n, d),
        positives: rows(&flat[block..2 * block], n, d),
        negatives: rows(&flat[2 * block..3 * block], n, d),
        similars: quad.then(|| rows(&flat[3 * block..4 * block], n, d)),
    }
}

fn pack(out: &LossOutput<f64>) -> Vec<f64> {
    let mut g: Vec<f64> = out.d_anchors.iter().chain(&out.d_positives).chain(&out.d_negatives).flatten().copied().collect();
    if let Some(s) = &out.d_similars {
        g.extend(s.iter().flatten());
    }
    g
}

fn pairwise_check(name: &str, instances: usize, seed: u64, quad: bool, loss: fn(&PairBatch<f64>, f64, f64) -> LossOutput<f64>) -> GradReport {
    let mut report = GradReport::new(name);
    let (n, d) = (4, 5);
    for inst in 0..instances {
        let mut rng = stream(seed, inst as u64);
        let width = if quad { 4 } else { 3 };
        let x = rand_vec(&mut rng, width * n * d, -2.0, 2.0);
        let a1 = rng.random_range(0.1..3.0);
        let a2 = a1 + rng.random_range(0.1..3.0);
        let f = |v: &[f64]| loss(&unpack(v, n, d, quad), a1, a2).loss;
        let g = pack(&loss(&unpack(&x, n, d, quad), a1, a2));
        report.check(&f, &x, &g, 0..x.len());
        report.instances += 1;
    }
    report
}

pub fn contrastive(instances: usize) -> GradReport {
    pairwise_check("contrastive", instances, 101, false, |b, a, _| contrastive_loss(b, a).unwrap())
}

pub fn triplet(instances: usize) -> GradReport {
    pairwise_check("triplet", instances, 102, false, |b, a, _| triplet_loss(b, a).unwrap())
}

pub fn quadruplet(instances: usize) -> GradReport {
    pairwise_check("quadruplet", instances, 103, true, |b, a1, a2| quadruplet_loss(b, a1, a2).unwrap())
}

pub fn cross_entropy_check(instances: usize) -> GradReport {
    let mut report = GradReport::new("cross_entropy");
    for inst in 0..instances {
        let mut rng = stream(104, inst as u64);
        let k = rng.random_range(2..12);
        let label = rng.random_range(0..k);
        let x = rand_vec(&mut rng, k, -5.0, 5.0);
        let (_, g) = cross_entropy(&x, label).unwrap();
        report.check(&|v| cross_entropy(v, label).unwrap().0, &x, &g, 0..k);
        report.instances += 1;
    }
    report
}

/// Prototype loss on free embeddings: `ways` classes with `shots` support and `queries` query rows each.
pub fn prototype(instances: usize) -> GradReport {
    let mut report = GradReport::new("pn_episode");
    for inst in 0..instances {
        let mut rng = stream(105, inst as u64);
        let (ways, shots, queries, d) = (rng.random_range(2..5), rng.random_range(1..4), 2, 4);
        let per = shots + queries;
        let support: Vec<Vec<usize>> = (0..ways).map(|w| (w * per..w * per + shots).collect()).collect();
        let query: Vec<(usize, usize)> = (0..ways).flat_map(|w| (w * per + shots..(w + 1) * per).map(move |r| (r, w))).collect();
        let n = ways * per;
        let x = rand_vec(&mut rng, n * d, -1.5, 1.5);
        let f = |v: &[f64]| prototype_loss(&rows(v, n, d), &support, &query).unwrap().0;
        let g: Vec<f64> = prototype_loss(&rows(&x, n, d), &support, &query).unwrap().1.concat();
        report.check(&f, &x, &g, 0..x.len());
        report.instances += 1;
    }
    report
}

fn tiny_arch(num_classes: Option<usize>) -> ArchConfig {
    ArchConfig { in_height: 8, in_width: 8, channels: vec![2, 3], embed_dim: 4, num_classes, adaptation: None }
}

/// Objective `sum(U * embeddings) + sum(V * logits)` with random upstream `U`, `V`.
fn network_objective(net: &EmbeddingNetwork<f64>, inputs: &[Vec<f64>], up_e: &[Vec<f64>], up_l: Option<&[Vec<f64>]>) -> f64 {
    let fwd = net.forward_inputs(inputs.to_vec()).unwrap();
    let dot = |a: &[Vec<f64>], b: &[Vec<f64>]| a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x * y).sum::<f64>();
    let mut total = dot(&fwd.embeddings, up_e);
    if let (Some(l), Some(u)) = (&fwd.logits, up_l) {
        total += dot(l, u);
    }
    total
}

/// Zero biases leave pre-activations of all-zero patches exactly on the ReLU
/// kink, where no stencil sees a one-sided slope; random biases move them off.
fn random_biases(net: EmbeddingNetwork<f64>, rng: &mut ChaCha8Rng) -> EmbeddingNetwork<f64> {
    let mut params = net.params.clone();
    for (i, b) in net.bias_mask().into_iter().enumerate() {
        if b {
            params[i] = rng.random_range(-0.2..0.2);
        }
    }
    EmbeddingNetwork::from_params(net.arch.clone(), params).unwrap()
}

/// Parameter gradients of every layer block, one report per named block.
pub fn layers(instances: usize) -> Vec<GradReport> {
    let names = EmbeddingNetwork::<f64>::init(tiny_arch(Some(5)), 0).unwrap().param_layout();
    let mut reports: Vec<GradReport> = names.iter().map(|(n, _)| GradReport::new(n)).collect();
    let mut adapt_reports = vec![GradReport::new("adaptation.weight"), GradReport::new("adaptation.bias")];
    for inst in 0..instances {
        let mut rng = stream(106, inst as u64);
        let net = random_biases(EmbeddingNetwork::<f64>::init(tiny_arch(Some(5)), rng.random()).unwrap(), &mut rng);
        let batch = 2;
        let inputs: Vec<Vec<f64>> = (0..batch).map(|_| rand_vec(&mut rng, 64, 0.0, 1.0)).collect();
        let up_e: Vec<Vec<f64>> = (0..batch).map(|_| rand_vec(&mut rng, 4, -1.0, 1.0)).collect();
        let up_l: Vec<Vec<f64>> = (0..batch).map(|_| rand_vec(&mut rng, 5, -1.0, 1.0)).collect();
        let fwd = net.forward_inputs(inputs.clone()).unwrap();
        let g = net.backward(&fwd, &up_e, Some(&up_l)).unwrap().0;
        let f = |p: &[f64]| {
            let n = EmbeddingNetwork::from_params(net.arch.clone(), p.to_vec()).unwrap();
            network_objective(&n, &inputs, &up_e, Some(&up_l))
        };
        for (report, (_, range)) in reports.iter_mut().zip(&names) {
            report.check(&f, &net.params, &g, range.clone());
            report.instances += 1;
        }

        let head = net.with_adaptation_head(AdaptationHead { channels: 3, post_train: true }, rng.random()).unwrap();
        let fwd = head.forward_inputs(inputs.clone()).unwrap();
        let g = head.backward(&fwd, &up_e, Some(&up_l)).unwrap().0;
        let layout = head.param_layout();
        let f = |p: &[f64]| {
            let mut n = EmbeddingNetwork::from_params(head.arch.clone(), p.to_vec()).unwrap();
            n.frozen_backbone = true;
            network_objective(&n, &inputs, &up_e, Some(&up_l))
        };
        for report in adapt_reports.iter_mut() {
            let range = layout.iter().find(|(n, _)| *n == report.name).unwrap().1.clone();
            report.check(&f, &head.params, &g, range);
            report.instances += 1;
        }
    }
    reports.extend(adapt_reports);
    reports
}

/// Prototype loss through the network: gradients w.r.t. all parameters.
pub fn pn_network(instances: usize) -> GradReport {
    let mut report = GradReport::new("pn_episode_network");
    let arch = ArchConfig { num_classes: None, ..tiny_arch(None) };
    for inst in 0..instances {
        let mut rng = stream(107, inst as u64);
        let images: Vec<SpectrogramImage> =
            (0..9).map(|_| SpectrogramImage::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap()).collect();
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let data = Dataset::new(images.iter().collect(), labels).unwrap();
        let ep = Episode { ways: vec![0, 1, 2], support: vec![vec![0, 1], vec![3, 4], vec![6, 7]], query: vec![2, 5, 8] };
        let net = random_biases(EmbeddingNetwork::<f64>::init(arch.clone(), rng.random()).unwrap(), &mut rng);
        let (_, g) = pn_episode_loss(&net, &data, &ep).unwrap();
        let f = |p: &[f64]| {
            let n = EmbeddingNetwork::from_params(arch.clone(), p.to_vec()).unwrap();
            pn_episode_loss(&n, &data, &ep).unwrap().0
        };
        report.check(&f, &net.params, &g.0, 0..net.params.len());
        report.instances += 1;
    }
    report
}

pub fn all(instances: usize) -> Vec<GradReport> {
    let mut out = vec![
        contrastive(instances),
        triplet(instances),
        quadruplet(instances),
        cross_entropy_check(instances),
        prototype(instances),
        pn_network(instances),
    ];
    out.extend(layers(instances));
    out
}
