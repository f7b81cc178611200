//! Per-layer thresholding, S/L partition, cyclic pair merging and masking,
//! plus the ablation strategies that share the same pipeline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::{estimate_curvature, significance, CurvatureProbe, PowerIterationConfig, ProbeDump, SignificanceMap};
use crate::error::{Error, Result};
use crate::network::{Batch, Network};
use crate::scalar::{sum_acc, Scalar};
use crate::seeding::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Curvature significance, cyclic pair merging.
    CampHive,
    /// Curvature significance, merging into a random significant weight.
    Hrp,
    /// Curvature significance, zeroing without merging.
    Hmp,
    /// Weight magnitude, zeroing without merging.
    Magnitude,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::CampHive, Strategy::Hrp, Strategy::Hmp, Strategy::Magnitude];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::CampHive => "camp-hive",
            Strategy::Hrp => "hrp",
            Strategy::Hmp => "hmp",
            Strategy::Magnitude => "magnitude",
        }
    }

    pub fn uses_curvature(&self) -> bool {
        !matches!(self, Strategy::Magnitude)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?} (expected camp-hive, hrp, hmp or magnitude)")))
    }
}

fn check_percent(p: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile must lie in [0, 100], got {p}")));
    }
    Ok(())
}

/// Nearest-rank percentile: the `r`-th smallest value with
/// `r = max(1, ceil(p / 100 * n))`.
pub fn percentile_threshold(sigma: &[f64], p: f64) -> Result<f64> {
    check_percent(p)?;
    if sigma.is_empty() {
        return Err(Error::InvalidArgument("cannot take a percentile of an empty layer".into()));
    }
    let mut sorted = sigma.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(p, sorted.len()) - 1])
}

fn nearest_rank(p: f64, n: usize) -> usize {
    let x = p * n as f64 / 100.0;
    // Snap values within rounding noise of an integer before taking the ceiling.
    let r = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (r as usize).clamp(1, n)
}

/// Significant (`sigma >= theta`) and less significant (`sigma < theta`)
/// weight indices of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub theta: f64,
    /// Descending by significance, ties by ascending index.
    pub significant: Vec<usize>,
    /// Ascending by significance, ties by ascending index.
    pub less: Vec<usize>,
}

pub fn partition(sigma: &[f64], theta: f64) -> Partition {
    let (mut significant, mut less): (Vec<usize>, Vec<usize>) = (0..sigma.len()).partition(|&i| sigma[i] >= theta);
    significant.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    less.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]).then(a.cmp(&b)));
    Partition { theta, significant, less }
}

/// 1-based significant position receiving the `i`-th (1-based) less
/// significant weight: `(i mod s) + 1`.
pub fn cyclic_index(i: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::InvalidArgument("no significant weights to merge into".into()));
    }
    if i == 0 {
        return Err(Error::InvalidArgument("cyclic positions are 1-based".into()));
    }
    Ok(i % s + 1)
}

/// One merge: the `less_pos`-th entry of `L` went into the `sig_pos`-th
/// entry of `S` (both 1-based); `source`/`target` are weight indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub less_pos: usize,
    pub sig_pos: usize,
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairingMap {
    pub pairs: Vec<Pair>,
}

impl PairingMap {
    /// Number of sources received by each significant position.
    pub fn in_degrees(&self, s: usize) -> Vec<usize> {
        let mut deg = vec![0; s];
        for p in &self.pairs {
            deg[p.sig_pos - 1] += 1;
        }
        deg
    }
}

/// Pairing of every less significant weight with a significant position.
pub fn cyclic_pairing(part: &Partition) -> Result<PairingMap> {
    let s = part.significant.len();
    if part.less.is_empty() {
        return Ok(PairingMap::default());
    }
    let pairs = part
        .less
        .iter()
        .enumerate()
        .map(|(k, &source)| {
            let j = cyclic_index(k + 1, s)?;
            Ok(Pair { less_pos: k + 1, sig_pos: j, source, target: part.significant[j - 1] })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairingMap { pairs })
}

/// Pairing with a uniformly drawn significant position per source.
pub fn random_pairing<R: Rng + ?Sized>(part: &Partition, rng: &mut R) -> Result<PairingMap> {
    let s = part.significant.len();
    if part.less.is_empty() {
        return Ok(PairingMap::default());
    }
    if s == 0 {
        return Err(Error::InvalidArgument("no significant weights to merge into".into()));
    }
    let pairs = part
        .less
        .iter()
        .enumerate()
        .map(|(k, &source)| {
            let j = rng.random_range(1..=s);
            Pair { less_pos: k + 1, sig_pos: j, source, target: part.significant[j - 1] }
        })
        .collect();
    Ok(PairingMap { pairs })
}

/// Adds each source weight into its target and zeroes the source, in pairing order.
pub fn apply_merge<T: Scalar>(weights: &mut [T], pairing: &PairingMap) {
    for p in &pairing.pairs {
        let moved = weights[p.source];
        weights[p.target] += moved;
        weights[p.source] = T::zero();
    }
}

/// Cyclic pair merging of one layer.
pub fn merge_cyclic<T: Scalar>(weights: &mut [T], part: &Partition) -> Result<PairingMap> {
    check_partition(weights.len(), part)?;
    let pairing = cyclic_pairing(part)?;
    apply_merge(weights, &pairing);
    Ok(pairing)
}

fn check_partition(n: usize, part: &Partition) -> Result<()> {
    if part.significant.len() + part.less.len() != n
        || part.significant.iter().chain(&part.less).any(|&i| i >= n)
    {
        return Err(Error::Shape(format!("partition does not cover a layer of {n} weights")));
    }
    Ok(())
}

/// Keep mask over the weight-only view (`true` = kept).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub keep: Vec<bool>,
}

impl PruneMask {
    pub fn all_kept(n: usize) -> Self {
        Self { keep: vec![true; n] }
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.zeros() as f64 / self.keep.len() as f64
        }
    }

    /// Fraction of pruned weights inside `range` of the weight view.
    pub fn sparsity_of(&self, start: usize, len: usize) -> f64 {
        if len == 0 {
            return 0.0;
        }
        self.keep[start..start + len].iter().filter(|&&k| !k).count() as f64 / len as f64
    }

    /// Zeroes every masked weight of `net`.
    pub fn apply<T: Scalar>(&self, net: &mut Network<T>) -> Result<()> {
        let mut w = net.weights_flat();
        if w.len() != self.keep.len() {
            return Err(Error::Shape(format!("mask has {} entries, network has {} weights", self.keep.len(), w.len())));
        }
        for (x, &k) in w.iter_mut().zip(&self.keep) {
            if !k {
                *x = T::zero();
            }
        }
        net.set_weights_flat(&w)
    }
}

/// Builds the weight-view mask from per-layer partitions laid out
/// consecutively with the given layer sizes.
pub fn build_mask(partitions: &[(usize, &Partition)]) -> PruneMask {
    let mut keep = Vec::new();
    for &(n, part) in partitions {
        let mut layer = vec![true; n];
        for &i in &part.less {
            layer[i] = false;
        }
        keep.extend(layer);
    }
    PruneMask { keep }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneRow {
    pub layer: usize,
    pub n_k: usize,
    pub theta: f64,
    pub s: usize,
    pub l: usize,
    pub sparsity: f64,
    pub weight_sum_before: f64,
    pub weight_sum_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub strategy: Strategy,
    pub p: f64,
    pub seed: u64,
    pub total_sparsity: f64,
    pub layers: Vec<LayerPruneRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curvature: Option<ProbeDump>,
}

/// Everything a pruning run produces.
#[derive(Debug, Clone)]
pub struct PruneOutcome<T> {
    pub network: Network<T>,
    pub mask: PruneMask,
    pub report: PruneReport,
    pub partitions: Vec<Partition>,
    pub pairings: Vec<PairingMap>,
    pub probe: Option<CurvatureProbe<T>>,
}

/// Prunes `net` at percentile `p` (0..=100) per layer. Curvature-based
/// strategies estimate the probe on `calib`; `magnitude` ignores it.
pub fn prune<T: Scalar>(
    net: &Network<T>,
    strategy: Strategy,
    p: f64,
    curvature: &PowerIterationConfig,
    calib: &Batch<T>,
    seed: u64,
) -> Result<PruneOutcome<T>> {
    check_percent(p)?;
    let (sig, probe) = if strategy.uses_curvature() {
        let probe = estimate_curvature(net, calib, curvature, seed)?;
        (significance(&probe, net)?, Some(probe))
    } else {
        (magnitude_significance(net), None)
    };
    let mut outcome = prune_with_significance(net, strategy, p, &sig, seed)?;
    if let Some(probe) = probe {
        outcome.report.curvature = Some(ProbeDump::new(&probe, &sig));
        outcome.probe = Some(probe);
    }
    Ok(outcome)
}

/// `|w|` per weighted layer.
pub fn magnitude_significance<T: Scalar>(net: &Network<T>) -> SignificanceMap {
    let w = net.weights_flat();
    crate::curvature::significance_from_vector(&w, net).expect("weight view matches itself")
}

/// Applies `strategy` given precomputed per-layer significance.
pub fn prune_with_significance<T: Scalar>(
    net: &Network<T>,
    strategy: Strategy,
    p: f64,
    sig: &SignificanceMap,
    seed: u64,
) -> Result<PruneOutcome<T>> {
    check_percent(p)?;
    let blocks = net.weight_blocks();
    if sig.layers.len() != blocks.len() {
        return Err(Error::Shape(format!(
            "significance covers {} layers, network has {} weighted layers",
            sig.layers.len(),
            blocks.len()
        )));
    }
    let mut rng = seeding::rng(seed, Stream::RandomPairing);
    let mut weights = net.weights_flat();
    let mut partitions = Vec::with_capacity(blocks.len());
    let mut pairings = Vec::with_capacity(blocks.len());
    let mut rows = Vec::with_capacity(blocks.len());
    for (block, layer_sig) in blocks.iter().zip(&sig.layers) {
        if layer_sig.layer != block.layer || layer_sig.values.len() != block.len {
            return Err(Error::Shape(format!("significance for layer {} does not match the network", block.layer)));
        }
        let w = &mut weights[block.start..block.start + block.len];
        let before = sum_acc(w);
        let theta = percentile_threshold(&layer_sig.values, p)?;
        let part = partition(&layer_sig.values, theta);
        if part.significant.is_empty() {
            return Err(Error::NoSignificantWeights { layer: block.layer });
        }
        let pairing = match strategy {
            Strategy::CampHive => merge_cyclic(w, &part)?,
            Strategy::Hrp => {
                let pairing = random_pairing(&part, &mut rng)?;
                apply_merge(w, &pairing);
                pairing
            }
            Strategy::Hmp | Strategy::Magnitude => {
                for &i in &part.less {
                    w[i] = T::zero();
                }
                PairingMap::default()
            }
        };
        rows.push(LayerPruneRow {
            layer: block.layer,
            n_k: block.len,
            theta,
            s: part.significant.len(),
            l: part.less.len(),
            sparsity: part.less.len() as f64 / block.len as f64,
            weight_sum_before: before,
            weight_sum_after: sum_acc(w),
        });
        partitions.push(part);
        pairings.push(pairing);
    }
    let mask = build_mask(&blocks.iter().map(|b| b.len).zip(&partitions).collect::<Vec<_>>());
    let mut network = net.clone();
    network.set_weights_flat(&weights)?;
    mask.apply(&mut network)?;
    let report = PruneReport {
        strategy,
        p,
        seed,
        total_sparsity: mask.sparsity(),
        layers: rows,
        curvature: None,
    };
    Ok(PruneOutcome { network, mask, report, partitions, pairings, probe: None })
}
