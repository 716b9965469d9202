//! Gradient-boosted regression trees with histogram splits.
//!
//! Squared loss only. Features are quantized once into at most `max_bins`
//! bins per feature; every tree is grown depth-first on residuals and leaf
//! values are mean residuals, shrunk by the learning rate at prediction time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Moments;

pub const MODEL_FORMAT: &str = "ratiovr-gbdt";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            learning_rate: 0.1,
            max_depth: 4,
            min_samples_leaf: 50,
            max_bins: 64,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::config("learning_rate must lie in (0, 1]"));
        }
        if self.max_depth < 1 {
            return Err(Error::config("max_depth must be at least 1"));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::config("min_samples_leaf must be at least 1"));
        }
        if !(2..=256).contains(&self.max_bins) {
            return Err(Error::config("max_bins must lie in [2, 256]"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::config("subsample must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, n_rows: usize, n_cols: usize) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: n_rows * n_cols,
            });
        }
        Ok(Self { values, n_rows, n_cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(values, rows.len(), n_cols)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_rows).map(move |i| self.values[i * self.n_cols + j])
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("features"))
        }
    }
}

/// Per-feature cut points; `x` falls in bin `b` when it exceeds exactly `b`
/// cuts, so `bin(x) <= b` iff `x <= cuts[b]`.
#[derive(Debug, Clone)]
struct BinMapper {
    cuts: Vec<Vec<f64>>,
}

impl BinMapper {
    fn fit(features: &FeatureMatrix, max_bins: usize) -> Self {
        let cuts = (0..features.n_cols())
            .map(|j| {
                let mut col: Vec<f64> = features.column(j).collect();
                col.sort_by(f64::total_cmp);
                feature_cuts(&col, max_bins)
            })
            .collect();
        Self { cuts }
    }

    fn bin(&self, feature: usize, x: f64) -> u8 {
        self.cuts[feature].partition_point(|&c| c < x) as u8
    }

    fn n_bins(&self, feature: usize) -> usize {
        self.cuts[feature].len() + 1
    }

    /// Row-major bin codes.
    fn transform(&self, features: &FeatureMatrix) -> Vec<u8> {
        let k = features.n_cols();
        features.values.iter().enumerate().map(|(i, &x)| self.bin(i % k, x)).collect()
    }
}

fn feature_cuts(sorted: &[f64], max_bins: usize) -> Vec<f64> {
    let mut distinct = sorted.to_vec();
    distinct.dedup();
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    }
    let n = sorted.len();
    let max = sorted[n - 1];
    let mut cuts: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for j in 1..max_bins {
        let q = j * n / max_bins;
        let (lo, hi) = (sorted[q - 1], sorted[q]);
        let cut = if lo == hi { lo } else { lo + (hi - lo) / 2.0 };
        if cut < max && cuts.last().map_or(true, |&last| cut > last) {
            cuts.push(cut);
        }
    }
    cuts
}

const LEAF: i32 = -1;

/// One regression tree stored as flat node arrays. Leaves carry
/// `feature == -1`; internal nodes route `x[feature] <= threshold` left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
    /// Training rows reaching each node.
    pub count: Vec<u32>,
}

impl Tree {
    fn empty() -> Self {
        Self {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
            count: Vec::new(),
        }
    }

    fn push_node(&mut self, count: usize) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(0.0);
        self.count.push(count as u32);
        self.feature.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] == LEAF
    }

    pub fn leaf_value(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        while self.feature[node] != LEAF {
            node = if x[self.feature[node] as usize] <= self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
        self.value[node]
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        let n = self.feature.len();
        let lens = [self.threshold.len(), self.left.len(), self.right.len(), self.value.len(), self.count.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::config("malformed tree arrays"));
        }
        for i in 0..n {
            if self.feature[i] != LEAF {
                let f = self.feature[i];
                let (l, r) = (self.left[i] as usize, self.right[i] as usize);
                if f < 0 || f as usize >= n_features || l <= i || r <= i || l >= n || r >= n {
                    return Err(Error::config("malformed tree node"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub format: String,
    pub version: u32,
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub params: GbdtParams,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut s = self.base_score;
        for tree in &self.trees {
            s += self.learning_rate * tree.leaf_value(x);
        }
        s
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        if features.n_cols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: features.n_cols(),
            });
        }
        Ok((0..features.n_rows())
            .map(|i| self.predict_row(features.row(i)))
            .collect())
    }

    /// The ensemble restricted to its first `n` trees.
    pub fn truncated(&self, n: usize) -> GbdtModel {
        GbdtModel {
            trees: self.trees[..n.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: GbdtModel = serde_json::from_str(text)?;
        if model.format != MODEL_FORMAT {
            return Err(Error::config(format!("unknown model format '{}'", model.format)));
        }
        if model.version != MODEL_VERSION {
            return Err(Error::SchemaVersion {
                found: model.version.to_string(),
                supported: MODEL_VERSION,
            });
        }
        for tree in &model.trees {
            tree.validate(model.n_features)?;
        }
        Ok(model)
    }
}

struct Binned<'a> {
    features: &'a FeatureMatrix,
    mapper: BinMapper,
    /// Row-major bin codes.
    codes: Vec<u8>,
}

/// Histogram slots per feature; any `u8` code indexes in bounds.
const STRIDE: usize = 256;

impl<'a> Binned<'a> {
    fn new(features: &'a FeatureMatrix, max_bins: usize) -> Self {
        let mapper = BinMapper::fit(features, max_bins);
        let codes = mapper.transform(features);
        Self { features, mapper, codes }
    }

    fn n_cols(&self) -> usize {
        self.features.n_cols()
    }

    fn row(&self, r: usize) -> &[u8] {
        let k = self.n_cols();
        &self.codes[r * k..(r + 1) * k]
    }
}

struct Split {
    feature: usize,
    bin: u8,
    gain: f64,
}

/// Residual sums and counts per (feature, bin).
struct Histogram {
    sum: Vec<[f64; STRIDE]>,
    count: Vec<[u32; STRIDE]>,
}

struct Grower<'b, 'a> {
    binned: &'b Binned<'a>,
    params: &'b GbdtParams,
    pool: Vec<Histogram>,
    scratch: Vec<u32>,
    /// Leaf reached by each row in the most recent tree.
    leaf_of: Vec<u32>,
}

impl<'b, 'a> Grower<'b, 'a> {
    fn new(binned: &'b Binned<'a>, params: &'b GbdtParams) -> Self {
        Self {
            binned,
            params,
            pool: Vec::new(),
            scratch: Vec::new(),
            leaf_of: vec![0; binned.features.n_rows()],
        }
    }

    fn take_histogram(&mut self) -> Histogram {
        let k = self.binned.n_cols();
        let mut h = self.pool.pop().unwrap_or_else(|| Histogram {
            sum: vec![[0.0; STRIDE]; k],
            count: vec![[0; STRIDE]; k],
        });
        h.sum.iter_mut().for_each(|s| s.fill(0.0));
        h.count.iter_mut().for_each(|c| c.fill(0));
        h
    }

    fn build_histogram(&mut self, rows: &[u32], residual: &[f64]) -> Histogram {
        let mut h = self.take_histogram();
        for &r in rows {
            let g = residual[r as usize];
            let codes = self.binned.row(r as usize);
            for ((s, c), &b) in h.sum.iter_mut().zip(h.count.iter_mut()).zip(codes) {
                s[b as usize] += g;
                c[b as usize] += 1;
            }
        }
        h
    }

    fn splittable(&self, n_rows: usize, depth: usize) -> bool {
        depth < self.params.max_depth && n_rows >= 2 * self.params.min_samples_leaf
    }

    /// Grows one tree over `rows` (global row indices) fitting `residual`
    /// (indexed by global row).
    fn grow(&mut self, rows: &mut [u32], residual: &[f64]) -> (Tree, Vec<u8>) {
        let mut tree = Tree::empty();
        let mut bins = Vec::new();
        let hist = if self.splittable(rows.len(), 0) {
            Some(self.build_histogram(rows, residual))
        } else {
            None
        };
        self.grow_node(&mut tree, &mut bins, rows, residual, 0, hist);
        (tree, bins)
    }

    fn grow_node(
        &mut self,
        tree: &mut Tree,
        bins: &mut Vec<u8>,
        rows: &mut [u32],
        residual: &[f64],
        depth: usize,
        hist: Option<Histogram>,
    ) -> usize {
        let node = tree.push_node(rows.len());
        bins.push(0);
        let sum: f64 = match &hist {
            Some(h) => h.sum[0].iter().sum(),
            None => rows.iter().map(|&r| residual[r as usize]).sum(),
        };
        let split = hist.as_ref().and_then(|h| self.best_split(h, rows.len(), sum));
        let Some(split) = split else {
            if let Some(h) = hist {
                self.pool.push(h);
            }
            tree.value[node] = sum / rows.len() as f64;
            for &r in rows.iter() {
                self.leaf_of[r as usize] = node as u32;
            }
            return node;
        };
        let mut parent = hist.expect("split implies a histogram");

        let k = self.binned.n_cols();
        self.scratch.clear();
        let mut n_left = 0;
        for i in 0..rows.len() {
            let r = rows[i];
            if self.binned.codes[r as usize * k + split.feature] <= split.bin {
                rows[n_left] = r;
                n_left += 1;
            } else {
                self.scratch.push(r);
            }
        }
        rows[n_left..].copy_from_slice(&self.scratch);
        let (left_rows, right_rows) = rows.split_at_mut(n_left);

        // histogram the smaller child; the larger one is the parent minus it
        let need_left = self.splittable(left_rows.len(), depth + 1);
        let need_right = self.splittable(right_rows.len(), depth + 1);
        let (left_hist, right_hist) = if need_left || need_right {
            let left_smaller = left_rows.len() <= right_rows.len();
            let small = if left_smaller {
                self.build_histogram(left_rows, residual)
            } else {
                self.build_histogram(right_rows, residual)
            };
            for (p, s) in parent.sum.iter_mut().flatten().zip(small.sum.iter().flatten()) {
                *p -= s;
            }
            for (p, s) in parent.count.iter_mut().flatten().zip(small.count.iter().flatten()) {
                *p -= s;
            }
            let (l, r) = if left_smaller { (small, parent) } else { (parent, small) };
            let keep = |h: Histogram, need: bool, pool: &mut Vec<Histogram>| {
                if need {
                    Some(h)
                } else {
                    pool.push(h);
                    None
                }
            };
            let l = keep(l, need_left, &mut self.pool);
            let r = keep(r, need_right, &mut self.pool);
            (l, r)
        } else {
            self.pool.push(parent);
            (None, None)
        };

        tree.feature[node] = split.feature as i32;
        tree.threshold[node] = self.binned.mapper.cuts[split.feature][split.bin as usize];
        bins[node] = split.bin;
        let left = self.grow_node(tree, bins, left_rows, residual, depth + 1, left_hist);
        let right = self.grow_node(tree, bins, right_rows, residual, depth + 1, right_hist);
        tree.left[node] = left as u32;
        tree.right[node] = right as u32;
        node
    }

    fn best_split(&self, hist: &Histogram, n_rows: usize, total: f64) -> Option<Split> {
        let parent = total * total / n_rows as f64;
        let min_leaf = self.params.min_samples_leaf as u32;
        let mut best: Option<Split> = None;
        for feature in 0..self.binned.n_cols() {
            let n_bins = self.binned.mapper.n_bins(feature);
            if n_bins < 2 {
                continue;
            }
            let hs = &hist.sum[feature][..n_bins];
            let hc = &hist.count[feature][..n_bins];
            let (mut left_sum, mut left_cnt) = (0.0, 0u32);
            for b in 0..n_bins - 1 {
                left_sum += hs[b];
                left_cnt += hc[b];
                let right_cnt = n_rows as u32 - left_cnt;
                if left_cnt < min_leaf {
                    continue;
                }
                if right_cnt < min_leaf {
                    break;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / left_cnt as f64
                    + right_sum * right_sum / right_cnt as f64
                    - parent;
                // strict comparison keeps the lowest feature, then lowest bin, on ties
                if gain > best.as_ref().map_or(0.0, |s| s.gain) {
                    best = Some(Split {
                        feature,
                        bin: b as u8,
                        gain,
                    });
                }
            }
        }
        best
    }
}

fn leaf_binned(tree: &Tree, bins: &[u8], codes: &[u8]) -> usize {
    let mut node = 0;
    while tree.feature[node] != LEAF {
        let f = tree.feature[node] as usize;
        node = if codes[f] <= bins[node] {
            tree.left[node] as usize
        } else {
            tree.right[node] as usize
        };
    }
    node
}

fn check_targets(targets: &[f64], n_rows: usize) -> Result<()> {
    if targets.len() != n_rows {
        return Err(Error::LengthMismatch {
            left: n_rows,
            right: targets.len(),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("targets"));
    }
    Ok(())
}

fn fit_rows(binned: &Binned<'_>, rows: &[u32], targets: &[f64], params: &GbdtParams) -> GbdtModel {
    let base_score = rows
        .iter()
        .map(|&r| targets[r as usize])
        .collect::<Moments>()
        .mean()
        .unwrap_or(0.0);
    let lr = params.learning_rate;
    let n_total = binned.features.n_rows();
    let mut prediction = vec![base_score; n_total];
    let mut residual = vec![0.0; n_total];
    let mut grower = Grower::new(binned, params);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sample: Vec<u32> = Vec::with_capacity(rows.len());
    let mut trees = Vec::with_capacity(params.n_trees);

    for _ in 0..params.n_trees {
        for &r in rows {
            let r = r as usize;
            residual[r] = targets[r] - prediction[r];
        }
        sample.clear();
        if params.subsample < 1.0 {
            sample.extend(rows.iter().copied().filter(|_| rng.random::<f64>() < params.subsample));
            if sample.is_empty() {
                sample.extend_from_slice(rows);
            }
        } else {
            sample.extend_from_slice(rows);
        }
        let (tree, bins) = grower.grow(&mut sample, &residual);
        if sample.len() == rows.len() {
            for &r in rows {
                let r = r as usize;
                prediction[r] += lr * tree.value[grower.leaf_of[r] as usize];
            }
        } else {
            for &r in rows {
                let r = r as usize;
                prediction[r] += lr * tree.value[leaf_binned(&tree, &bins, binned.row(r))];
            }
        }
        trees.push(tree);
    }

    GbdtModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        base_score,
        learning_rate: lr,
        n_features: binned.features.n_cols(),
        params: params.clone(),
        trees,
    }
}

pub fn fit(features: &FeatureMatrix, targets: &[f64], params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    features.check_finite()?;
    check_targets(targets, features.n_rows())?;
    if features.n_rows() < 2 * params.min_samples_leaf {
        return Err(Error::TooFewRows(format!(
            "{} rows for min_samples_leaf {}",
            features.n_rows(),
            params.min_samples_leaf
        )));
    }
    let binned = Binned::new(features, params.max_bins);
    let rows: Vec<u32> = (0..features.n_rows() as u32).collect();
    Ok(fit_rows(&binned, &rows, targets, params))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Fold of each row, from a seeded hash of the row index.
pub fn fold_assignment(n_rows: usize, folds: usize, seed: u64) -> Vec<usize> {
    (0..n_rows as u64)
        .map(|i| (splitmix64(seed ^ splitmix64(i)) % folds as u64) as usize)
        .collect()
}

/// Out-of-fold predictor sharing one quantization and fold layout across
/// several targets.
pub struct CrossFitter<'a> {
    binned: Binned<'a>,
    folds: usize,
    params: GbdtParams,
    fold_rows: Vec<(Vec<u32>, Vec<u32>)>,
}

impl<'a> CrossFitter<'a> {
    /// `folds == 0` selects in-sample prediction from one model fit on all
    /// rows.
    pub fn new(features: &'a FeatureMatrix, params: &GbdtParams, folds: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        features.check_finite()?;
        let n = features.n_rows();
        if folds == 1 {
            return Err(Error::config("cross-fitting needs 0 or at least 2 folds"));
        }
        if n < 2 * params.min_samples_leaf || (folds > 0 && folds > n / (2 * params.min_samples_leaf)) {
            return Err(Error::TooFewRows(format!(
                "{n} rows cannot support {folds} folds with min_samples_leaf {}",
                params.min_samples_leaf
            )));
        }
        let fold_rows = if folds == 0 {
            let all: Vec<u32> = (0..n as u32).collect();
            vec![(all.clone(), all)]
        } else {
            let assignment = fold_assignment(n, folds, seed);
            let fold_rows: Vec<(Vec<u32>, Vec<u32>)> = (0..folds)
                .map(|k| {
                    let (held, train): (Vec<u32>, Vec<u32>) =
                        (0..n as u32).partition(|&i| assignment[i as usize] == k);
                    (train, held)
                })
                .collect();
            for (k, (train, _)) in fold_rows.iter().enumerate() {
                if train.len() < 2 * params.min_samples_leaf {
                    return Err(Error::TooFewRows(format!(
                        "fold {k} leaves {} training rows",
                        train.len()
                    )));
                }
            }
            fold_rows
        };
        Ok(Self {
            binned: Binned::new(features, params.max_bins),
            folds,
            params: params.clone(),
            fold_rows,
        })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn predict(&self, targets: &[f64]) -> Result<Vec<f64>> {
        let features = self.binned.features;
        check_targets(targets, features.n_rows())?;
        let mut out = vec![0.0; features.n_rows()];
        for (train, held) in &self.fold_rows {
            let model = fit_rows(&self.binned, train, targets, &self.params);
            for &r in held {
                out[r as usize] = model.predict_row(features.row(r as usize));
            }
        }
        Ok(out)
    }
}

pub fn cross_fit_predict(
    features: &FeatureMatrix,
    targets: &[f64],
    params: &GbdtParams,
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if folds < 2 {
        return Err(Error::config("cross_fit_predict needs at least 2 folds"));
    }
    CrossFitter::new(features, params, folds, seed)?.predict(targets)
}
