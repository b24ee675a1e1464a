//! Reference mixture models for generating labeled test data without an
//! upstream detector.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gmm::{sample_synthetic, ClassProfile, Component, GmmModel, ModelFile};
use crate::model::MaskRecord;

/// A group of mixture components whose mean score and mean IoU rise
/// together across the given ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub weight: f64,
    pub components: usize,
    pub score: (f64, f64),
    pub iou: (f64, f64),
    pub score_sd: f64,
    pub iou_sd: f64,
}

impl Band {
    fn new(weight: f64, components: usize, score: (f64, f64), iou: (f64, f64), score_sd: f64, iou_sd: f64) -> Self {
        Self { weight, components, score, iou, score_sd, iou_sd }
    }
}

/// Shape of the generated data: per class, the bands' components are placed
/// at random feature directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub classes: usize,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation of features around a unit direction.
    pub feature_sd: f64,
    /// Pull of component directions towards a shared axis, signed by quality,
    /// so that similar-looking masks tend to be of similar quality.
    pub quality_alignment: f64,
    pub bands: Vec<Band>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            classes: 5,
            feature_dim: 8,
            feature_sd: 0.12,
            quality_alignment: 1.0,
            bands: vec![
                // objects the detector gets right
                Band::new(0.45, 8, (0.8, 0.97), (0.82, 0.93), 0.05, 0.05),
                // borderline masks, mostly just below the IoU bar
                Band::new(0.12, 6, (0.55, 0.75), (0.6, 0.72), 0.06, 0.12),
                // fragments and misses
                Band::new(0.33, 10, (0.1, 0.45), (0.05, 0.4), 0.05, 0.08),
                // confidently wrong
                Band::new(0.15, 2, (0.9, 0.96), (0.25, 0.35), 0.03, 0.08),
            ],
        }
    }
}

pub fn class_name(index: usize) -> String {
    format!("class{index:02}")
}

fn unit_direction<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn lerp((lo, hi): (f64, f64), u: f64) -> f64 {
    lo + (hi - lo) * u
}

fn band_components<R: Rng>(rng: &mut R, scenario: &Scenario, axis: &[f64], band: &Band) -> Vec<Component> {
    let k = band.components.max(1);
    (0..k)
        .map(|j| {
            let u = if k == 1 { rng.random::<f64>() } else { (j as f64 + rng.random::<f64>()) / k as f64 };
            let (score, iou) = (lerp(band.score, u), lerp(band.iou, u));
            let pull = scenario.quality_alignment * (2.0 * iou - 1.0);
            let raw: Vec<f64> = unit_direction(rng, scenario.feature_dim).iter().zip(axis).map(|(r, a)| r + pull * a).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let mut mean: Vec<f64> = raw.into_iter().map(|x| x / norm).collect();
            mean.push(score);
            mean.push(iou);
            let mut diag_variance = vec![scenario.feature_sd.powi(2); scenario.feature_dim];
            diag_variance.push(band.score_sd.powi(2));
            diag_variance.push(band.iou_sd.powi(2));
            Component { weight: band.weight / k as f64, mean, diag_variance }
        })
        .collect()
}

/// One model per class, drawn from `seed`.
pub fn reference_models(scenario: &Scenario, seed: u64) -> ModelFile {
    let total: f64 = scenario.bands.iter().map(|b| b.weight).sum();
    let mut models = Vec::with_capacity(scenario.classes);
    let mut profiles = Vec::with_capacity(scenario.classes);
    for c in 0..scenario.classes {
        let mut rng = crate::rng::stream(seed, c as u64);
        let axis = unit_direction(&mut rng, scenario.feature_dim);
        let mut components: Vec<Component> =
            scenario.bands.iter().flat_map(|b| band_components(&mut rng, scenario, &axis, b)).collect();
        components.iter_mut().for_each(|comp| comp.weight /= total);
        let name = class_name(c);
        let mut profile = ClassProfile::singletons(name.clone(), 0);
        profile.instances_per_image = [(1u32, 50u64), (2, 25), (3, 15), (4, 10)].into_iter().collect();
        profile.instance_count = profile.histogram_total();
        models.push(GmmModel { class_name: name, components });
        profiles.push(profile);
    }
    ModelFile::new(models, profiles)
}

/// `per_class` masks for every class of the scenario.
pub fn generate(scenario: &Scenario, per_class: usize, seed: u64) -> Result<Vec<MaskRecord>> {
    let file = reference_models(scenario, seed);
    let mut out = Vec::with_capacity(per_class * scenario.classes);
    for (i, (model, profile)) in file.models.iter().zip(&file.profiles).enumerate() {
        out.extend(sample_synthetic(model, profile, per_class, crate::rng::splitmix64(seed ^ i as u64))?);
    }
    Ok(out)
}

/// Pearson correlation of score and gt_iou over masks that have one.
pub fn score_iou_correlation(masks: &[MaskRecord]) -> f64 {
    let pairs: Vec<(f64, f64)> = masks.iter().filter_map(|m| m.gt_iou.map(|q| (m.score, q))).collect();
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
