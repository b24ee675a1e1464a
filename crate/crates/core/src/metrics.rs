//! Quantity, quality and cost of a finished run, and the cumulative
//! trade-off table behind the quantity-versus-cost curves.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{EventKind, ForestResult, RunResult};
use crate::error::{Error, Result};
use crate::model::{CostLedger, EngineConfig, LabelSource, MaskRecord};

pub const REPORT_VERSION: u32 = 1;

/// Metrics for one class or for the whole run. Quality fields are `None`
/// when nothing was accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub quantity: u64,
    /// Mean gt_iou of accepted masks.
    pub quality: Option<f64>,
    /// Share of accepted masks with gt_iou >= k_iou.
    pub correct_fraction: Option<f64>,
    /// Mean gt_iou over accepted masks that matched an object (gt_iou > 0).
    pub sq: Option<f64>,
    pub clusters_annotated: u64,
    pub questions_asked: u64,
    pub wall_seconds: f64,
    /// Accepted masks per `seconds_per_manual_mask` of annotation time.
    pub masks_per_manual_equivalent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub strategy: String,
    pub classes: Vec<ClassMetrics>,
    /// Quality here is the mean of the per-class qualities; the other
    /// quality fields pool all accepted masks.
    pub aggregate: Metrics,
}

#[derive(Default)]
struct Tally {
    n: u64,
    iou_sum: f64,
    correct: u64,
    matched: u64,
    matched_sum: f64,
}

impl Tally {
    fn add(&mut self, iou: f64, k_iou: f64) {
        self.n += 1;
        self.iou_sum += iou;
        self.correct += (iou >= k_iou) as u64;
        if iou > 0.0 {
            self.matched += 1;
            self.matched_sum += iou;
        }
    }

    fn absorb(&mut self, other: &Tally) {
        self.n += other.n;
        self.iou_sum += other.iou_sum;
        self.correct += other.correct;
        self.matched += other.matched;
        self.matched_sum += other.matched_sum;
    }

    fn quality(&self) -> Option<f64> {
        (self.n > 0).then(|| self.iou_sum / self.n as f64)
    }

    fn metrics(&self, ledger: &CostLedger, config: &EngineConfig) -> Metrics {
        let manual = ledger.manual_equivalent_masks(config);
        Metrics {
            quantity: self.n,
            quality: self.quality(),
            correct_fraction: (self.n > 0).then(|| self.correct as f64 / self.n as f64),
            sq: (self.matched > 0).then(|| self.matched_sum / self.matched as f64),
            clusters_annotated: ledger.clusters_annotated,
            questions_asked: ledger.questions_asked,
            wall_seconds: ledger.wall_seconds_estimate,
            masks_per_manual_equivalent: (manual > 0.0).then(|| self.n as f64 / manual),
        }
    }
}

fn index_masks(masks: &[MaskRecord]) -> HashMap<&str, &MaskRecord> {
    masks.iter().map(|m| (m.id.as_str(), m)).collect()
}

fn lookup_iou(index: &HashMap<&str, &MaskRecord>, id: &str) -> Result<f64> {
    let mask = index.get(id).ok_or_else(|| Error::Input(format!("result refers to unknown mask {id:?}")))?;
    mask.gt_iou.ok_or_else(|| Error::MissingGroundTruth(id.to_string()))
}

/// Accepted-mask tallies keyed by the accepting cluster.
fn accepted_by_cluster(
    result: &RunResult,
    index: &HashMap<&str, &MaskRecord>,
    k_iou: f64,
) -> Result<BTreeMap<usize, Tally>> {
    let mut out: BTreeMap<usize, Tally> = BTreeMap::new();
    for label in result.propagated_labels().filter(|l| l.positive()) {
        if let LabelSource::Propagated { cluster_id } = label.source {
            out.entry(cluster_id).or_default().add(lookup_iou(index, &label.mask_id)?, k_iou);
        }
    }
    Ok(out)
}

fn class_tally(result: &RunResult, index: &HashMap<&str, &MaskRecord>, k_iou: f64) -> Result<Tally> {
    let mut total = Tally::default();
    for t in accepted_by_cluster(result, index, k_iou)?.values() {
        total.absorb(t);
    }
    Ok(total)
}

pub fn compute_class_metrics(result: &RunResult, masks: &[MaskRecord], config: &EngineConfig) -> Result<Metrics> {
    let index = index_masks(masks);
    Ok(class_tally(result, &index, config.k_iou)?.metrics(result.ledger(), config))
}

pub fn compute_report(result: &ForestResult, masks: &[MaskRecord]) -> Result<MetricsReport> {
    result.check_version()?;
    let config = &result.config;
    let index = index_masks(masks);
    let mut pooled = Tally::default();
    let mut classes = Vec::with_capacity(result.classes.len());
    let mut class_qualities = Vec::new();
    for run in &result.classes {
        let tally = class_tally(run, &index, config.k_iou)?;
        pooled.absorb(&tally);
        class_qualities.extend(tally.quality());
        classes.push(ClassMetrics { class_name: run.class_name.clone(), metrics: tally.metrics(run.ledger(), config) });
    }
    let mut aggregate = pooled.metrics(&result.total_ledger(), config);
    aggregate.quality =
        (!class_qualities.is_empty()).then(|| class_qualities.iter().sum::<f64>() / class_qualities.len() as f64);
    Ok(MetricsReport { version: REPORT_VERSION, strategy: result.strategy.name(), classes, aggregate })
}

/// One row of the trade-off table. Counts are cumulative over the run,
/// taking classes in result order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run: String,
    pub row: u64,
    pub class: String,
    pub event: EventKind,
    pub node: usize,
    pub size: usize,
    pub quantity: u64,
    pub quality: Option<f64>,
    pub clusters_annotated: u64,
    pub questions_asked: u64,
    pub seconds: f64,
}

pub const CURVE_HEADER: &str =
    "run,row,class,event,node,size,quantity,quality,clusters_annotated,questions_asked,seconds";

pub fn export_curve(result: &ForestResult, masks: &[MaskRecord], run: &str) -> Result<Vec<CurveRow>> {
    let config = &result.config;
    let index = index_masks(masks);
    let mut rows = Vec::new();
    let mut accepted = Tally::default();
    let (mut questions, mut clusters) = (0u64, 0u64);
    for class in &result.classes {
        let by_cluster = accepted_by_cluster(class, &index, config.k_iou)?;
        for event in class.events() {
            if event.kind == EventKind::Accepted {
                if let Some(t) = by_cluster.get(&event.node) {
                    accepted.absorb(t);
                }
            }
            let q = questions + event.ledger.questions_asked;
            rows.push(CurveRow {
                run: run.to_string(),
                row: rows.len() as u64,
                class: class.class_name.clone(),
                event: event.kind,
                node: event.node,
                size: event.size,
                quantity: accepted.n,
                quality: accepted.quality(),
                clusters_annotated: clusters + event.ledger.clusters_annotated,
                questions_asked: q,
                seconds: CostLedger::seconds_for(q, config.initial_masks_drawn, config),
            });
        }
        questions += class.ledger().questions_asked;
        clusters += class.ledger().clusters_annotated;
    }
    Ok(rows)
}

/// Writes rows as CSV. With `append`, rows go after any existing content
/// and the header is only written to an empty file.
pub fn write_curve(path: impl AsRef<Path>, rows: &[CurveRow], append: bool) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    let empty = file.metadata()?.len() == 0;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if empty {
        writer.write_record(CURVE_HEADER.split(','))?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Size of the largest score-ranked prefix whose mean gt_iou is at least
/// `target`, and its quality. `None` if even the top mask misses it.
pub fn matched_confidence_baseline(masks: &[MaskRecord], target: f64) -> Result<Option<(usize, f64)>> {
    let ids = crate::engine::confidence_baseline(masks, masks.len())?;
    let index = index_masks(masks);
    let mut best = None;
    let mut sum = 0.0;
    for (i, id) in ids.iter().enumerate() {
        sum += lookup_iou(&index, id)?;
        let mean = sum / (i + 1) as f64;
        if mean >= target {
            best = Some((i + 1, mean));
        }
    }
    Ok(best)
}
