//! Diagonal-covariance Gaussian mixtures over `[feature, score, iou]` triplets,
//! used to synthesize mask pools of arbitrary size.

use std::collections::BTreeMap;

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskRecord;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub diag_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub class_name: String,
    pub components: Vec<Component>,
}

impl GmmModel {
    /// Dimension of the joint variable (feature dimension + 2).
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.dim().saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.components.is_empty() || dim < 3 {
            return Err(Error::Input(format!("model for {:?} has no usable components", self.class_name)));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("weights of {:?} sum to {total}", self.class_name)));
        }
        for c in &self.components {
            if !(c.weight > 0.0) || c.mean.len() != dim || c.diag_variance.len() != dim {
                return Err(Error::Input(format!("malformed component in {:?}", self.class_name)));
            }
            if c.diag_variance.iter().any(|&v| !(v >= VARIANCE_FLOOR)) {
                return Err(Error::Input(format!("variance below floor in {:?}", self.class_name)));
            }
        }
        Ok(())
    }

    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for c in &self.components {
            for (m, mu) in mean.iter_mut().zip(&c.mean) {
                *m += c.weight * mu;
            }
        }
        mean
    }

    /// Per-coordinate variance of the mixture.
    pub fn mixture_variance(&self) -> Vec<f64> {
        let mean = self.mixture_mean();
        let mut second = vec![0.0; self.dim()];
        for c in &self.components {
            for i in 0..second.len() {
                second[i] += c.weight * (c.diag_variance[i] + c.mean[i] * c.mean[i]);
            }
        }
        second.iter().zip(&mean).map(|(s, m)| s - m * m).collect()
    }

    /// Mean log-density of the rows under the model.
    pub fn mean_log_likelihood(&self, rows: &[Vec<f64>]) -> f64 {
        let pre = Precomputed::new(&self.components);
        let mut logp = vec![0.0; self.components.len()];
        rows.iter().map(|x| pre.log_sum_exp(x, &mut logp)).sum::<f64>() / rows.len() as f64
    }
}

/// Count of masks per class and how they group into images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_name: String,
    pub instance_count: u64,
    /// Instances-per-image value mapped to the number of images having it.
    pub instances_per_image: BTreeMap<u32, u64>,
}

impl ClassProfile {
    /// Every mask in its own image.
    pub fn singletons(class_name: impl Into<String>, instance_count: u64) -> Self {
        let mut instances_per_image = BTreeMap::new();
        if instance_count > 0 {
            instances_per_image.insert(1, instance_count);
        }
        Self { class_name: class_name.into(), instance_count, instances_per_image }
    }

    /// Groups records by `image_uri`; records without one count as their own image.
    pub fn from_records(class_name: impl Into<String>, records: &[MaskRecord]) -> Self {
        let mut per_image: BTreeMap<&str, u32> = BTreeMap::new();
        let mut loose = 0u64;
        for r in records {
            match &r.image_uri {
                Some(uri) => *per_image.entry(uri.as_str()).or_default() += 1,
                None => loose += 1,
            }
        }
        let mut hist = BTreeMap::new();
        if loose > 0 {
            hist.insert(1u32, loose);
        }
        for count in per_image.into_values() {
            *hist.entry(count).or_insert(0) += 1;
        }
        Self {
            class_name: class_name.into(),
            instance_count: records.len() as u64,
            instances_per_image: hist,
        }
    }

    pub fn histogram_total(&self) -> u64 {
        self.instances_per_image.iter().map(|(k, c)| *k as u64 * c).sum()
    }
}

/// Everything `fit-gmm` writes and `sample` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub models: Vec<GmmModel>,
    pub profiles: Vec<ClassProfile>,
}

impl ModelFile {
    pub fn new(models: Vec<GmmModel>, profiles: Vec<ClassProfile>) -> Self {
        Self { version: MODEL_FILE_VERSION, models, profiles }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::Version { found: self.version, expected: MODEL_FILE_VERSION });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: GmmModel,
    /// Mean log-likelihood before the first update and after every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Joint `[f, s, iou]` rows; every record needs `gt_iou`.
pub fn triplet_rows(records: &[MaskRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| {
            let iou = r.gt_iou.ok_or_else(|| Error::MissingGroundTruth(r.id.clone()))?;
            let mut row = Vec::with_capacity(r.feature.len() + 2);
            row.extend_from_slice(&r.feature);
            row.push(r.score);
            row.push(iou);
            Ok(row)
        })
        .collect()
}

pub fn fit_gmm(records: &[MaskRecord], k: usize, options: FitOptions) -> Result<GmmModel> {
    fit_gmm_traced(records, k, options).map(|o| o.model)
}

/// Fits a `k`-component mixture to one class of records by EM.
pub fn fit_gmm_traced(records: &[MaskRecord], k: usize, options: FitOptions) -> Result<FitOutcome> {
    let class_name = match records.first() {
        Some(r) => r.class_name.clone(),
        None => return Err(Error::Input("cannot fit a mixture to zero records".into())),
    };
    if let Some(other) = records.iter().find(|r| r.class_name != class_name) {
        return Err(Error::Input(format!(
            "fit_gmm expects one class, found {class_name:?} and {:?}",
            other.class_name
        )));
    }
    let rows = triplet_rows(records)?;
    fit_rows(class_name, &rows, k, options)
}

pub fn fit_rows(class_name: String, rows: &[Vec<f64>], k: usize, options: FitOptions) -> Result<FitOutcome> {
    if k == 0 {
        return Err(Error::Config("component count must be positive".into()));
    }
    if rows.len() < k {
        return Err(Error::Input(format!("need at least {k} records to fit {k} components, got {}", rows.len())));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Input("rows have mixed dimensions".into()));
    }

    if rows.iter().all(|r| r == &rows[0]) {
        let model = GmmModel {
            class_name,
            components: vec![Component {
                weight: 1.0,
                mean: rows[0].clone(),
                diag_variance: vec![VARIANCE_FLOOR; dim],
            }],
        };
        let ll = model.mean_log_likelihood(rows);
        return Ok(FitOutcome { model, log_likelihood: vec![ll], iterations: 0, converged: true });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let centers = kmeans_pp_seeds(rows, k, &mut rng);
    let mut components = initial_components(rows, &centers);

    let n = rows.len();
    let mut resp = vec![0.0; n * components.len()];
    let mut trace = Vec::with_capacity(options.max_iterations + 1);
    let mut ll = e_step(rows, &components, &mut resp);
    trace.push(ll);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        components = m_step(rows, &components, &resp);
        resp.resize(n * components.len(), 0.0);
        let next = e_step(rows, &components, &mut resp);
        trace.push(next);
        iterations += 1;
        let gain = next - ll;
        ll = next;
        if gain < options.tolerance {
            converged = true;
            break;
        }
    }

    Ok(FitOutcome {
        model: GmmModel { class_name, components },
        log_likelihood: trace,
        iterations,
        converged,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Returns fewer than `k` centers when the data has fewer
/// distinct points.
fn kmeans_pp_seeds(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![rows[rng.random_range(0..rows.len())].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = rows.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if d2[pick] <= 0.0 {
            // rounding landed on an existing center
            pick = d2.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap();
        }
        let center = rows[pick].clone();
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &center));
        }
        centers.push(center);
    }
    centers
}

/// Hard assignment to the nearest seed, then moments per group.
fn initial_components(rows: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<Component> {
    let dim = rows[0].len();
    let k = centers.len();
    let mut resp = vec![0.0; rows.len() * k];
    for (i, r) in rows.iter().enumerate() {
        let nearest = centers
            .iter()
            .enumerate()
            .map(|(j, c)| (j, sq_dist(r, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j)
            .unwrap();
        resp[i * k + nearest] = 1.0;
    }
    let placeholder: Vec<Component> = centers
        .iter()
        .map(|c| Component { weight: 1.0 / k as f64, mean: c.clone(), diag_variance: vec![1.0; dim] })
        .collect();
    m_step(rows, &placeholder, &resp)
}

struct Precomputed {
    log_weight_norm: Vec<f64>,
    means: Vec<Vec<f64>>,
    inv_var: Vec<Vec<f64>>,
}

impl Precomputed {
    fn new(components: &[Component]) -> Self {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let log_weight_norm = components
            .iter()
            .map(|c| {
                let log_det: f64 = c.diag_variance.iter().map(|v| v.ln()).sum();
                c.weight.ln() - 0.5 * (c.mean.len() as f64 * ln_2pi + log_det)
            })
            .collect();
        Self {
            log_weight_norm,
            means: components.iter().map(|c| c.mean.clone()).collect(),
            inv_var: components.iter().map(|c| c.diag_variance.iter().map(|v| 1.0 / v).collect()).collect(),
        }
    }

    /// Fills `logp` with per-component joint log-densities and returns their log-sum-exp.
    fn log_sum_exp(&self, x: &[f64], logp: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for (j, lp) in logp.iter_mut().enumerate() {
            let maha: f64 = x
                .iter()
                .zip(&self.means[j])
                .zip(&self.inv_var[j])
                .map(|((xi, mi), iv)| (xi - mi) * (xi - mi) * iv)
                .sum();
            *lp = self.log_weight_norm[j] - 0.5 * maha;
            max = max.max(*lp);
        }
        max + logp.iter().map(|lp| (lp - max).exp()).sum::<f64>().ln()
    }
}

/// Writes responsibilities into `resp` (row-major, n × k) and returns the
/// mean log-likelihood.
fn e_step(rows: &[Vec<f64>], components: &[Component], resp: &mut [f64]) -> f64 {
    let k = components.len();
    let pre = Precomputed::new(components);
    let mut total = 0.0;
    for (i, x) in rows.iter().enumerate() {
        let r = &mut resp[i * k..(i + 1) * k];
        let lse = pre.log_sum_exp(x, r);
        for v in r.iter_mut() {
            *v = (*v - lse).exp();
        }
        total += lse;
    }
    total / rows.len() as f64
}

/// Maximizes the expected complete-data likelihood under the variance floor.
/// Components that received no responsibility are dropped; removing a
/// zero-weight component leaves the likelihood unchanged.
fn m_step(rows: &[Vec<f64>], components: &[Component], resp: &[f64]) -> Vec<Component> {
    let n = rows.len();
    let k = components.len();
    let dim = rows[0].len();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
        if nk <= f64::MIN_POSITIVE * n as f64 {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for (i, x) in rows.iter().enumerate() {
            let r = resp[i * k + j];
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += r * xi;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; dim];
        for (i, x) in rows.iter().enumerate() {
            let r = resp[i * k + j];
            for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
                *v += r * (xi - m) * (xi - m);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / nk).max(VARIANCE_FLOOR));
        out.push(Component { weight: nk / n as f64, mean, diag_variance: var });
    }
    let total: f64 = out.iter().map(|c| c.weight).sum();
    out.iter_mut().for_each(|c| c.weight /= total);
    out
}

/// Draws `n` synthetic masks. Score and IoU are clamped to `[0, 1]`; ids and
/// image grouping are a pure function of the seed.
pub fn sample_synthetic(model: &GmmModel, profile: &ClassProfile, n: usize, seed: u64) -> Result<Vec<MaskRecord>> {
    model.validate()?;
    let dim = model.dim();
    let d = dim - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picker = WeightedIndex::new(model.components.iter().map(|c| c.weight))
        .map_err(|e| Error::Input(format!("bad mixture weights: {e}")))?;

    let image_sizes: Vec<(u32, u64)> = profile.instances_per_image.iter().map(|(k, c)| (*k, *c)).collect();
    let image_picker = if image_sizes.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(image_sizes.iter().map(|(_, c)| *c)).map_err(|e| Error::Input(format!("bad profile: {e}")))?)
    };

    let mut out = Vec::with_capacity(n);
    let mut image_idx = 0u64;
    let mut left_in_image = 0u32;
    for i in 0..n {
        if left_in_image == 0 {
            image_idx += 1;
            left_in_image = match &image_picker {
                Some(p) => image_sizes[p.sample(&mut rng)].0.max(1),
                None => 1,
            };
        }
        left_in_image -= 1;

        let comp = &model.components[picker.sample(&mut rng)];
        let mut x = Vec::with_capacity(dim);
        for (m, v) in comp.mean.iter().zip(&comp.diag_variance) {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(m + v.sqrt() * z);
        }
        let iou = x[d + 1].clamp(0.0, 1.0);
        let score = x[d].clamp(0.0, 1.0);
        x.truncate(d);
        out.push(MaskRecord {
            id: format!("{}-{seed}-{i:07}", model.class_name),
            class_name: model.class_name.clone(),
            score,
            feature: x,
            gt_iou: Some(iou),
            image_uri: Some(format!("synthetic/{}/{seed}-{image_idx:07}.jpg", model.class_name)),
            polygon: None,
        });
    }
    Ok(out)
}
