//! Activation statistics, mean absolute deviation between a base and a
//! pruned network, and accuracy evaluation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::network::{Batch, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples per forward chunk when walking a large probe or test set.
const CHUNK: usize = 256;

/// A layer output that is reported: every relu output, plus the output of
/// any weighted layer not followed by a relu (typically the logits).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSite {
    pub layer: usize,
    pub label: String,
}

pub fn activation_sites<T: Scalar>(net: &Network<T>) -> Vec<ActivationSite> {
    let specs = net.specs();
    let mut sites = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let next_is_relu = matches!(specs.get(k + 1), Some(LayerSpec::Relu));
        let label = match spec {
            LayerSpec::Relu => match k.checked_sub(1).map(|j| &specs[j]) {
                Some(prev) if prev.is_weighted() => format!("{}{}+relu", prev.name(), k - 1),
                _ => format!("relu{k}"),
            },
            s if s.is_weighted() && !next_is_relu => format!("{}{k}", s.name()),
            _ => continue,
        };
        sites.push(ActivationSite { layer: k, label });
    }
    sites
}

/// Runs `f` on the outputs of every site for consecutive chunks of `inputs`.
fn for_each_chunk<T: Scalar>(
    net: &Network<T>,
    inputs: &Tensor<T>,
    mut f: impl FnMut(&[Tensor<T>]) -> Result<()>,
) -> Result<()> {
    let n = inputs.shape()[0];
    let width: usize = inputs.shape()[1..].iter().product();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut shape = inputs.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, inputs.data()[start * width..end * width].to_vec())?;
        f(&net.activations(&chunk)?)?;
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Min, max and mean of every activation site over the probe inputs.
pub fn activation_stats<T: Scalar>(net: &Network<T>, probe: &Tensor<T>) -> Result<Vec<(ActivationSite, ActivationStats)>> {
    let sites = activation_sites(net);
    let mut acc: Vec<(f64, f64, f64, usize)> = vec![(f64::INFINITY, f64::NEG_INFINITY, 0.0, 0); sites.len()];
    for_each_chunk(net, probe, |acts| {
        for (site, a) in sites.iter().zip(acc.iter_mut()) {
            for x in acts[site.layer].data() {
                let x = x.to_acc();
                a.0 = a.0.min(x);
                a.1 = a.1.max(x);
                a.2 += x;
            }
            a.3 += acts[site.layer].len();
        }
        Ok(())
    })?;
    Ok(sites
        .into_iter()
        .zip(acc)
        .map(|(s, (min, max, sum, n))| (s, ActivationStats { min, max, mean: sum / n as f64 }))
        .collect())
}

/// Mean of `|a_base - a_pruned|` over every element and probe sample, per site.
pub fn mad<T: Scalar>(base: &Network<T>, pruned: &Network<T>, probe: &Tensor<T>) -> Result<Vec<(ActivationSite, f64)>> {
    if !base.same_architecture(pruned) {
        return Err(Error::Shape("MAD needs two networks with the same architecture".into()));
    }
    let sites = activation_sites(base);
    let mut sums = vec![(0.0f64, 0usize); sites.len()];
    let n = probe.shape()[0];
    let width: usize = probe.shape()[1..].iter().product();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut shape = probe.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, probe.data()[start * width..end * width].to_vec())?;
        let a = base.activations(&chunk)?;
        let b = pruned.activations(&chunk)?;
        for (site, s) in sites.iter().zip(sums.iter_mut()) {
            for (x, y) in a[site.layer].data().iter().zip(b[site.layer].data()) {
                s.0 += (x.to_acc() - y.to_acc()).abs();
            }
            s.1 += a[site.layer].len();
        }
        start = end;
    }
    Ok(sites.into_iter().zip(sums).map(|(site, (sum, n))| (site, sum / n as f64)).collect())
}

/// One row of the probe table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub label: String,
    pub base: ActivationStats,
    pub pruned: ActivationStats,
    /// Base vs pruned network before fine-tuning.
    pub mad: f64,
    /// Base vs fine-tuned network, when one was produced.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mad_finetuned: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub samples: usize,
    pub layers: Vec<ProbeRow>,
}

impl ProbeStats {
    pub fn collect<T: Scalar>(
        base: &Network<T>,
        pruned: &Network<T>,
        finetuned: Option<&Network<T>>,
        probe: &Tensor<T>,
    ) -> Result<Self> {
        let base_stats = activation_stats(base, probe)?;
        let pruned_stats = activation_stats(pruned, probe)?;
        let mads = mad(base, pruned, probe)?;
        let tuned = finetuned.map(|f| mad(base, f, probe)).transpose()?;
        let layers = base_stats
            .into_iter()
            .zip(pruned_stats)
            .zip(mads)
            .enumerate()
            .map(|(i, (((site, b), (_, p)), (_, m)))| ProbeRow {
                layer: site.layer,
                label: site.label,
                base: b,
                pruned: p,
                mad: m,
                mad_finetuned: tuned.as_ref().map(|t| t[i].1),
            })
            .collect();
        Ok(Self { samples: probe.shape()[0], layers })
    }

    pub fn mean_mad(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|r| r.mad).sum::<f64>() / self.layers.len() as f64
    }

    /// CSV with columns `model,layer,label,min,max,mean,mad`; one row per
    /// model (`base`, `pruned`) and site. The base rows carry `mad = 0`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "layer", "label", "min", "max", "mean", "mad"])?;
        for (model, pick) in [("base", true), ("pruned", false)] {
            for row in &self.layers {
                let s = if pick { row.base } else { row.pruned };
                let mad = if pick { 0.0 } else { row.mad };
                w.write_record([
                    model.to_string(),
                    row.layer.to_string(),
                    row.label.clone(),
                    s.min.to_string(),
                    s.max.to_string(),
                    s.mean.to_string(),
                    mad.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    /// Only for datasets with at least five classes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<f64>,
    pub samples: usize,
}

/// Top-1 (and top-5 when there are at least five classes) accuracy. Ties in
/// the logits rank the lower class index first.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Batch<T>) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let classes = net.num_classes();
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut offset = 0;
    for_each_chunk(net, data.inputs(), |acts| {
        let logits = acts.last().expect("non-empty");
        for row in logits.data().chunks_exact(classes) {
            let y = data.labels()[offset];
            offset += 1;
            let ly = row[y];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(c, &l)| l > ly || (l == ly && c < y))
                .count();
            hits1 += usize::from(rank < 1);
            hits5 += usize::from(rank < 5);
        }
        Ok(())
    })?;
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: 100.0 * hits1 as f64 / n,
        top5: (classes >= 5).then(|| 100.0 * hits5 as f64 / n),
        samples: data.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub baseline: Accuracy,
    pub pruned: Accuracy,
    /// `pruned.top1 - baseline.top1`, percentage points.
    pub delta_acc: f64,
}

impl AccuracyReport {
    pub fn new(baseline: Accuracy, pruned: Accuracy) -> Self {
        Self { baseline, pruned, delta_acc: pruned.top1 - baseline.top1 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Layer;

    fn relu_only() -> Network<f64> {
        Network::new(vec![2], vec![
            Layer::activation(LayerSpec::Relu).unwrap(),
            Layer::dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn relu_stats() {
        let net = relu_only();
        let probe = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        let stats = activation_stats(&net, &probe).unwrap();
        assert_eq!(stats[0].0.label, "relu0");
        assert_eq!(stats[0].1, ActivationStats { min: 0.0, max: 2.0, mean: 1.0 });
    }

    #[test]
    fn zero_network_stats_vanish() {
        let net = Network::new(vec![3], vec![
            Layer::dense(3, 4, &[0.0; 12], &[0.0; 4]).unwrap(),
            Layer::activation(LayerSpec::Relu).unwrap(),
            Layer::dense(4, 2, &[0.0; 8], &[0.0; 2]).unwrap(),
        ])
        .unwrap();
        let probe = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0]).unwrap();
        for (site, s) in activation_stats(&net, &probe).unwrap() {
            assert_eq!((s.min, s.max, s.mean), (0.0, 0.0, 0.0), "{}", site.label);
        }
        let labels: Vec<String> = activation_sites(&net).into_iter().map(|s| s.label).collect();
        assert_eq!(labels, vec!["dense0+relu", "dense2"]);
    }

    #[test]
    fn mad_hand_value() {
        // Identity dense layer; the pruned copy adds 0.5 bias.
        let base = Network::new(vec![2], vec![Layer::dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap()]).unwrap();
        let pruned = Network::new(vec![2], vec![Layer::dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.5, 0.5]).unwrap()]).unwrap();
        let probe = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let m = mad(&base, &pruned, &probe).unwrap();
        assert_eq!(m[0].1, 0.5);
        assert_eq!(mad(&base, &base, &probe).unwrap()[0].1, 0.0);
        assert!(mad(&base, &relu_only(), &probe).is_err());
    }

    #[test]
    fn constant_prediction_accuracy() {
        // Zero weights, decreasing bias: class 0 always predicted, top-5 = classes 0..5.
        let bias: Vec<f64> = (0..10).map(|c| -(c as f64)).collect();
        let net = Network::new(vec![1], vec![Layer::dense(1, 10, &[0.0; 10], &bias).unwrap()]).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let data = Batch::new(Tensor::new(vec![100, 1], vec![1.0; 100]).unwrap(), labels, 10).unwrap();
        let acc = evaluate(&net, &data).unwrap();
        assert_eq!(acc.top1, 10.0);
        assert_eq!(acc.top5, Some(50.0));
        let r = AccuracyReport::new(acc, Accuracy { top1: 12.5, top5: None, samples: 100 });
        assert!((r.delta_acc - 2.5).abs() < 1e-9);
    }

    #[test]
    fn csv_columns() {
        let net = relu_only();
        let probe = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        let stats = ProbeStats::collect(&net, &net, None, &probe).unwrap();
        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,layer,label,min,max,mean,mad\n"));
        assert_eq!(text.lines().count(), 1 + 2 * stats.layers.len());
    }
}
