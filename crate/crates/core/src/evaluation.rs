//! Held-out evaluation: posterior-mean latents, plug-in mutual information
//! between latent dimensions and factors, and linear probes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdamConfig, ParamStore, Tensor};
use crate::config::EvalConfig;
use crate::corpus::{write_atomic, Corpus};
use crate::error::{Error, Result};
use crate::model::MultiViewVae;
use crate::synthesis::{FactorLabel, Timbre};

pub const MI_CSV: &str = "mi_matrix.csv";
pub const PROBE_CSV: &str = "probe_accuracy.csv";
pub const HEATMAP_PGM: &str = "mi_heatmap.pgm";
pub const HEATMAP_LEGEND: &str = "mi_heatmap_legend.json";
const CELL_PX: usize = 16;
const BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subspace {
    Private,
    Shared,
    Both,
}

impl Subspace {
    pub const ALL: [Subspace; 3] = [Subspace::Private, Subspace::Shared, Subspace::Both];

    pub fn name(self) -> &'static str {
        match self {
            Subspace::Private => "private",
            Subspace::Shared => "shared",
            Subspace::Both => "both",
        }
    }
}

impl std::str::FromStr for Subspace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subspace::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subspace {s:?} (private, shared, both)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Timbre,
    Frequency,
}

impl Factor {
    pub const ALL: [Factor; 2] = [Factor::Timbre, Factor::Frequency];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Timbre => "timbre",
            Factor::Frequency => "frequency",
        }
    }

    pub fn label(self, l: &FactorLabel) -> usize {
        match self {
            Factor::Timbre => l.timbre_class,
            Factor::Frequency => l.frequency_bin,
        }
    }
}

impl std::str::FromStr for Factor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Factor::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (timbre, frequency)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub sample: usize,
    pub private: Vec<f64>,
    pub shared: Vec<f64>,
    pub label: FactorLabel,
}

impl LatentRow {
    pub fn features(&self, s: Subspace) -> Vec<f64> {
        match s {
            Subspace::Private => self.private.clone(),
            Subspace::Shared => self.shared.clone(),
            Subspace::Both => [self.private.as_slice(), &self.shared].concat(),
        }
    }
}

/// Posterior-mean latents of held-out samples, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub d_private: usize,
    pub d_shared: usize,
    pub n_frequency_bins: usize,
    pub rows: Vec<LatentRow>,
    /// Held-out samples that appear in no pair and were skipped.
    pub orphans: usize,
}

impl LatentTable {
    pub fn n_classes(&self, f: Factor) -> usize {
        match f {
            Factor::Timbre => Timbre::COUNT,
            Factor::Frequency => self.n_frequency_bins,
        }
    }

    pub fn dim_names(&self) -> Vec<String> {
        (0..self.d_private)
            .map(|k| format!("private_{k}"))
            .chain((0..self.d_shared).map(|k| format!("shared_{k}")))
            .collect()
    }
}

/// Encodes every held-out sample through the first test pair it belongs
/// to. The private code is that view's posterior mean; the shared code is
/// the fused posterior mean of the pair.
pub fn extract_latents(
    model: &MultiViewVae,
    store: &ParamStore<f32>,
    corpus: &Corpus,
) -> Result<LatentTable> {
    let m = &corpus.manifest;
    let pairs = m.test_pairs();
    let mut first: BTreeMap<usize, (usize, bool)> = BTreeMap::new();
    for (p, &(a, b)) in pairs.iter().enumerate() {
        first.entry(a).or_insert((p, true));
        first.entry(b).or_insert((p, false));
    }
    let n_test = m.n_samples - m.n_train_samples;
    let orphans = n_test - first.len();
    let needed: Vec<usize> = {
        let mut v: Vec<usize> = first.values().map(|&(p, _)| p).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (dp, ds) = (model.config().d_private, model.config().d_shared);
    // pair -> (private mean of view 1, private mean of view 2, fused shared mean)
    type Means = (Vec<f64>, Vec<f64>, Vec<f64>);
    let mut posts: BTreeMap<usize, Means> = BTreeMap::new();
    for chunk in needed.chunks(BATCH) {
        let x1: Tensor<f32> = corpus.batch(chunk.iter().map(|&p| pairs[p].0));
        let x2: Tensor<f32> = corpus.batch(chunk.iter().map(|&p| pairs[p].1));
        let post = model.infer(store, &x1, &x2)?;
        for (b, &p) in chunk.iter().enumerate() {
            let row = |v: &[f32], d: usize| {
                v[b * d..(b + 1) * d]
                    .iter()
                    .map(|&x| x as f64)
                    .collect::<Vec<_>>()
            };
            posts.insert(
                p,
                (
                    row(&post.zp1.mean, dp),
                    row(&post.zp2.mean, dp),
                    row(&post.zs.mean, ds),
                ),
            );
        }
    }
    let rows = first
        .iter()
        .map(|(&sample, &(p, is_first))| {
            let (a, b, s) = &posts[&p];
            LatentRow {
                sample,
                private: if is_first { a.clone() } else { b.clone() },
                shared: s.clone(),
                label: m.factors[sample],
            }
        })
        .collect();
    Ok(LatentTable {
        d_private: dp,
        d_shared: ds,
        n_frequency_bins: m.bin_edges.len() - 1,
        rows,
        orphans,
    })
}

/// Equal-frequency bin index of each value. Thresholds are empirical
/// quantiles, so tied values always share a bin.
pub fn equal_frequency_bins(values: &[f64], n_bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut thresholds: Vec<f64> = (1..n_bins).map(|b| sorted[b * n / n_bins]).collect();
    thresholds.dedup();
    values
        .iter()
        .map(|v| thresholds.partition_point(|t| t <= v))
        .collect()
}

/// Plug-in mutual information (bits) between two discrete label vectors.
pub fn discrete_mi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (pa[&x] * pb[&y])).log2())
        .sum::<f64>()
        .max(0.0)
}

/// MI between each latent dimension and each factor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiMatrix {
    pub dims: Vec<String>,
    /// `values[k] = [MI(dim_k; timbre), MI(dim_k; frequency)]`, bits.
    pub values: Vec<[f64; 2]>,
    pub d_private: usize,
    /// Dimensions with a single distinct value (reported as zero MI).
    pub constant_dims: Vec<String>,
}

impl MiMatrix {
    fn sum(&self, shared: bool, f: Factor) -> f64 {
        let range = if shared {
            self.d_private..self.values.len()
        } else {
            0..self.d_private
        };
        self.values[range].iter().map(|v| v[f as usize]).sum()
    }

    /// Shared-over-private MI with timbre.
    pub fn timbre_ratio(&self) -> f64 {
        self.sum(true, Factor::Timbre) / self.sum(false, Factor::Timbre)
    }

    /// Private-over-shared MI with frequency.
    pub fn frequency_ratio(&self) -> f64 {
        self.sum(false, Factor::Frequency) / self.sum(true, Factor::Frequency)
    }

    pub fn subspace_sum(&self, s: Subspace, f: Factor) -> f64 {
        match s {
            Subspace::Private => self.sum(false, f),
            Subspace::Shared => self.sum(true, f),
            Subspace::Both => self.sum(false, f) + self.sum(true, f),
        }
    }
}

pub fn mi_matrix(table: &LatentTable, n_bins: usize) -> Result<MiMatrix> {
    if table.rows.is_empty() {
        return Err(Error::Estimator(
            "no held-out latents to estimate MI from".into(),
        ));
    }
    let dims = table.dim_names();
    let labels: Vec<Vec<usize>> = Factor::ALL
        .iter()
        .map(|&f| table.rows.iter().map(|r| f.label(&r.label)).collect())
        .collect();
    let mut values = Vec::with_capacity(dims.len());
    let mut constant_dims = Vec::new();
    for (k, name) in dims.iter().enumerate() {
        let col: Vec<f64> = table
            .rows
            .iter()
            .map(|r| {
                if k < table.d_private {
                    r.private[k]
                } else {
                    r.shared[k - table.d_private]
                }
            })
            .collect();
        if col.iter().all(|&v| v == col[0]) {
            constant_dims.push(name.clone());
            values.push([0.0, 0.0]);
            continue;
        }
        let bins = equal_frequency_bins(&col, n_bins);
        values.push([
            discrete_mi(&bins, &labels[0]),
            discrete_mi(&bins, &labels[1]),
        ]);
    }
    Ok(MiMatrix {
        dims,
        values,
        d_private: table.d_private,
        constant_dims,
    })
}

/// Held-out accuracy of a multinomial logistic regression from the given
/// latent subspace to a factor. Features are standardized with
/// probe-training statistics; the model is fitted by full-batch Adam.
pub fn probe(
    table: &LatentTable,
    subspace: Subspace,
    factor: Factor,
    cfg: &EvalConfig,
) -> Result<f64> {
    let n = table.rows.len();
    let n_train = (n as f64 * cfg.probe_train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Probe(format!(
            "{n} latents cannot be split for probing"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.probe_seed));
    let (train, test) = order.split_at(n_train);
    let classes = table.n_classes(factor);
    let y = |i: usize| factor.label(&table.rows[i].label);
    let mut present = vec![false; classes];
    train.iter().for_each(|&i| present[y(i)] = true);
    if let Some(c) = present.iter().position(|&p| !p) {
        let name = match factor {
            Factor::Timbre => Timbre::from_id(c)
                .map(|t| t.name().to_string())
                .unwrap_or_default(),
            Factor::Frequency => format!("frequency bin {c}"),
        };
        return Err(Error::Probe(format!(
            "class {name} absent from probe training split"
        )));
    }

    let feats: Vec<Vec<f64>> = table.rows.iter().map(|r| r.features(subspace)).collect();
    let d = feats[0].len();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        feats[i]
            .iter()
            .zip(&mut mean)
            .for_each(|(v, m)| *m += v / n_train as f64);
    }
    for &i in train {
        for k in 0..d {
            std[k] += (feats[i][k] - mean[k]).powi(2) / n_train as f64;
        }
    }
    let std: Vec<f64> = std
        .iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let x = |i: usize| -> Vec<f64> { (0..d).map(|k| (feats[i][k] - mean[k]) / std[k]).collect() };
    let xs_train: Vec<Vec<f64>> = train.iter().map(|&i| x(i)).collect();

    let mut store = ParamStore::<f64>::new();
    let w_id = store.add("probe.weight", Tensor::zeros(&[classes, d]));
    let b_id = store.add("probe.bias", Tensor::zeros(&[classes]));
    let adam = AdamConfig {
        lr: cfg.probe_lr,
        ..AdamConfig::default()
    };
    let logits = |store: &ParamStore<f64>, xi: &[f64]| -> Vec<f64> {
        let (w, b) = (store.value(w_id).data(), store.value(b_id).data());
        (0..classes)
            .map(|c| {
                b[c] + w[c * d..(c + 1) * d]
                    .iter()
                    .zip(xi)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    };
    for _ in 0..cfg.probe_steps {
        store.zero_grad();
        let mut gw = vec![0.0; classes * d];
        let mut gb = vec![0.0; classes];
        for (xi, &i) in xs_train.iter().zip(train) {
            let z = logits(&store, xi);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = (e[c] / s - if c == y(i) { 1.0 } else { 0.0 }) / n_train as f64;
                gb[c] += g;
                gw[c * d..(c + 1) * d]
                    .iter_mut()
                    .zip(xi)
                    .for_each(|(w, v)| *w += g * v);
            }
        }
        store.accumulate(w_id, &gw);
        store.accumulate(b_id, &gb);
        store.adam_step(&adam)?;
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z = logits(&store, &x(i));
            let pred = (0..classes).fold(0, |best, c| if z[c] > z[best] { c } else { best });
            pred == y(i)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Probe accuracy for every subspace/factor combination.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Indexed `[subspace][factor]`.
    pub accuracy: [[f64; 2]; 3],
}

impl ProbeReport {
    pub fn get(&self, s: Subspace, f: Factor) -> f64 {
        self.accuracy[s as usize][f as usize]
    }
}

pub fn probe_all(table: &LatentTable, cfg: &EvalConfig) -> Result<ProbeReport> {
    let mut accuracy = [[0.0; 2]; 3];
    for s in Subspace::ALL {
        for f in Factor::ALL {
            accuracy[s as usize][f as usize] = probe(table, s, f, cfg)?;
        }
    }
    Ok(ProbeReport { accuracy })
}

/// Full held-out evaluation of a trained model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub table: LatentTable,
    pub mi: MiMatrix,
    pub probes: ProbeReport,
}

pub fn evaluate(
    model: &MultiViewVae,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    let table = extract_latents(model, store, corpus)?;
    let mi = mi_matrix(&table, cfg.mi_bins)?;
    let probes = probe_all(&table, cfg)?;
    Ok(Evaluation { table, mi, probes })
}

pub fn mi_csv(mi: &MiMatrix) -> String {
    let mut s = String::from("dimension,timbre,frequency\n");
    for (name, v) in mi.dims.iter().zip(&mi.values) {
        let _ = writeln!(s, "{name},{:.6},{:.6}", v[0], v[1]);
    }
    s
}

pub fn probe_csv(p: &ProbeReport) -> String {
    let mut s = String::from("subspace,timbre,frequency\n");
    for sub in Subspace::ALL {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6}",
            sub.name(),
            p.get(sub, Factor::Timbre),
            p.get(sub, Factor::Frequency)
        );
    }
    s
}

/// Binary 8-bit PGM of the MI matrix: one `CELL_PX`-square cell per entry,
/// dimensions as rows and factors as columns, white at `scale_max` bits.
pub fn mi_heatmap(mi: &MiMatrix) -> (Vec<u8>, f64) {
    let scale_max = mi.values.iter().flatten().cloned().fold(0.0, f64::max);
    let (w, h) = (2 * CELL_PX, mi.values.len() * CELL_PX);
    let mut img = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in 0..h {
        for col in 0..w {
            let v = mi.values[row / CELL_PX][col / CELL_PX];
            let level = if scale_max > 0.0 {
                (v / scale_max * 255.0).round()
            } else {
                0.0
            };
            img.push(level.clamp(0.0, 255.0) as u8);
        }
    }
    (img, scale_max)
}

/// Writes the MI matrix, probe table, heatmap and its legend to `dir`.
/// Everything is rendered before the first write, so a failure leaves no
/// partial report behind.
pub fn emit_reports(mi: Option<&MiMatrix>, probes: Option<&ProbeReport>, dir: &Path) -> Result<()> {
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    if let Some(mi) = mi {
        if mi.values.is_empty() {
            return Err(Error::Estimator("empty MI matrix".into()));
        }
        let (pgm, scale_max) = mi_heatmap(mi);
        let legend = serde_json::json!({
            "rows": mi.dims,
            "columns": Factor::ALL.map(Factor::name),
            "cell_pixels": CELL_PX,
            "units": "bits",
            "black": 0.0,
            "white": scale_max,
            "constant_dims": mi.constant_dims,
        });
        files.push((MI_CSV, mi_csv(mi).into_bytes()));
        files.push((HEATMAP_PGM, pgm));
        files.push((HEATMAP_LEGEND, serde_json::to_vec_pretty(&legend)?));
    }
    if let Some(p) = probes {
        files.push((PROBE_CSV, probe_csv(p).into_bytes()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}
