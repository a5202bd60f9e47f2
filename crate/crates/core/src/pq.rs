//! Panoptic-quality evaluation: segment matching, per-category accumulation
//! and PQ/SQ/RQ reporting for known, unknown and unseen groups.
//!
//! Matching follows the COCO panoptic protocol. A (prediction, ground truth)
//! pair of compatible categories is a true positive when its IoU is strictly
//! above 0.5, where pixels the prediction places on ground-truth void are left
//! out of the union. Crowd ground truth never yields a false negative, and an
//! unmatched prediction lying mostly (> 50%) on void or same-category crowd
//! area is ignored rather than counted as a false positive. `strict` mode
//! turns all three conventions off.
//!
//! In open-set mode ground-truth segments of unknown classes are scored under
//! [`UNKNOWN_CATEGORY`] and those of unseen classes under [`UNSEEN_CATEGORY`];
//! a predicted unknown segment may match either.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{
    CategoryId, CategoryRegistry, Kind, PanopticAnnotation, SegmentId, Status, UNKNOWN_CATEGORY,
    UNSEEN_CATEGORY, VOID,
};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchOptions {
    /// Disable void exclusion, false-positive forgiveness and crowd handling.
    pub strict: bool,
    /// Score unknown/unseen ground truth under the reserved categories.
    pub open_set: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            strict: false,
            open_set: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CategoryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl CategoryCounts {
    fn add(&mut self, other: &CategoryCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// Per-category TP/FP/FN counts and summed IoU of true positives.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct MatchStats {
    per_category: BTreeMap<CategoryId, CategoryCounts>,
}

impl MatchStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, category: CategoryId) -> CategoryCounts {
        self.per_category.get(&category).copied().unwrap_or_default()
    }

    pub fn entry(&mut self, category: CategoryId) -> &mut CategoryCounts {
        self.per_category.entry(category).or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CategoryId, &CategoryCounts)> {
        self.per_category.iter().map(|(&c, v)| (c, v))
    }

    pub fn merge(&mut self, other: &MatchStats) {
        for (&cat, counts) in &other.per_category {
            self.entry(cat).add(counts);
        }
    }

    pub fn totals(&self) -> CategoryCounts {
        let mut t = CategoryCounts::default();
        for c in self.per_category.values() {
            t.add(c);
        }
        t
    }
}

/// Folds per-image stats in the given order.
pub fn accumulate(stats: &[MatchStats]) -> MatchStats {
    let mut acc = MatchStats::new();
    for s in stats {
        acc.merge(s);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub gt: SegmentId,
    pub pred: SegmentId,
    /// Category the pair is scored under.
    pub category: CategoryId,
    pub iou: f64,
}

/// Full outcome of matching one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMatch {
    pub stats: MatchStats,
    pub pairs: Vec<MatchedPair>,
    pub false_negatives: Vec<SegmentId>,
    pub false_positives: Vec<SegmentId>,
    /// Unmatched predictions forgiven for lying on void or crowd area.
    pub ignored: Vec<SegmentId>,
}

/// Scoring category of a ground-truth segment.
fn gt_bucket(cat: CategoryId, registry: &CategoryRegistry, opts: MatchOptions) -> Result<CategoryId> {
    if cat == UNKNOWN_CATEGORY {
        return Ok(cat);
    }
    let status = registry.status(cat).ok_or(Error::UnknownCategory(cat))?;
    Ok(match (opts.open_set, status) {
        (true, Status::Unknown) => UNKNOWN_CATEGORY,
        (true, Status::Unseen) => UNSEEN_CATEGORY,
        _ => cat,
    })
}

/// Scoring category of a predicted segment; predictions cannot claim unseen.
fn pred_bucket(
    cat: CategoryId,
    registry: &CategoryRegistry,
    opts: MatchOptions,
) -> Result<CategoryId> {
    if cat == UNKNOWN_CATEGORY {
        return Ok(cat);
    }
    let status = registry.status(cat).ok_or(Error::UnknownCategory(cat))?;
    Ok(match (opts.open_set, status) {
        (true, Status::Unknown | Status::Unseen) => UNKNOWN_CATEGORY,
        _ => cat,
    })
}

/// Whether a prediction scored under `pred` may match ground truth scored
/// under `gt`.
pub fn compatible(gt: CategoryId, pred: CategoryId) -> bool {
    gt == pred || (gt == UNSEEN_CATEGORY && pred == UNKNOWN_CATEGORY)
}

struct SegmentState {
    bucket: CategoryId,
    crowd: bool,
    area: u64,
    matched: bool,
}

#[inline]
fn pair_key(gt: SegmentId, pred: SegmentId) -> u64 {
    ((gt as u64) << 32) | pred as u64
}

/// Joint pixel histogram keyed by (gt id, pred id). Runs of identical pairs
/// are counted before touching the table.
fn joint_histogram(gt: &[SegmentId], pred: &[SegmentId]) -> HashMap<u64, u64> {
    let mut hist: HashMap<u64, u64> = HashMap::new();
    let mut iter = gt.iter().zip(pred.iter());
    let Some((&g0, &p0)) = iter.next() else {
        return hist;
    };
    let mut key = pair_key(g0, p0);
    let mut run = 1u64;
    for (&g, &p) in iter {
        let k = pair_key(g, p);
        if k == key {
            run += 1;
        } else {
            *hist.entry(key).or_insert(0) += run;
            key = k;
            run = 1;
        }
    }
    *hist.entry(key).or_insert(0) += run;
    hist
}

fn segment_states(
    ann: &PanopticAnnotation,
    registry: &CategoryRegistry,
    opts: MatchOptions,
    is_gt: bool,
) -> Result<HashMap<SegmentId, SegmentState>> {
    ann.segments
        .iter()
        .map(|s| {
            let bucket = if is_gt {
                gt_bucket(s.category, registry, opts)?
            } else {
                pred_bucket(s.category, registry, opts)?
            };
            Ok((
                s.id,
                SegmentState {
                    bucket,
                    crowd: is_gt && s.crowd && !opts.strict,
                    area: 0,
                    matched: false,
                },
            ))
        })
        .collect()
}

/// Matches the segments of one image pair.
pub fn match_image(
    gt: &PanopticAnnotation,
    pred: &PanopticAnnotation,
    registry: &CategoryRegistry,
    opts: MatchOptions,
) -> Result<ImageMatch> {
    if gt.map.dims() != pred.map.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.map.dims(),
            found: pred.map.dims(),
        });
    }
    let mut gt_segs = segment_states(gt, registry, opts, true)?;
    let mut pred_segs = segment_states(pred, registry, opts, false)?;

    let hist = joint_histogram(gt.map.ids(), pred.map.ids());
    for (&key, &count) in &hist {
        let (g, p) = ((key >> 32) as SegmentId, key as SegmentId);
        if g != VOID {
            gt_segs
                .get_mut(&g)
                .ok_or_else(|| {
                    Error::Invalid(format!("ground-truth map id {g} has no segment record"))
                })?
                .area += count;
        }
        if p != VOID {
            pred_segs
                .get_mut(&p)
                .ok_or_else(|| {
                    Error::Invalid(format!("predicted map id {p} has no segment record"))
                })?
                .area += count;
        }
    }

    let void_overlap = |p: SegmentId| -> u64 {
        if opts.strict {
            0
        } else {
            hist.get(&pair_key(VOID, p)).copied().unwrap_or(0)
        }
    };

    // Deterministic order so that iou_sum is summed identically every run.
    let mut keys: Vec<u64> = hist.keys().copied().collect();
    keys.sort_unstable();

    let mut out = ImageMatch::default();
    for &key in &keys {
        let (g, p) = ((key >> 32) as SegmentId, key as SegmentId);
        if g == VOID || p == VOID {
            continue;
        }
        let (g_state, p_state) = (&gt_segs[&g], &pred_segs[&p]);
        if g_state.crowd || !compatible(g_state.bucket, p_state.bucket) {
            continue;
        }
        let inter = hist[&key];
        let union = p_state.area + g_state.area - inter - void_overlap(p);
        let iou = inter as f64 / union as f64;
        if iou > IOU_THRESHOLD {
            debug_assert!(!g_state.matched && !p_state.matched);
            let category = g_state.bucket;
            out.pairs.push(MatchedPair {
                gt: g,
                pred: p,
                category,
                iou,
            });
            let counts = out.stats.entry(category);
            counts.tp += 1;
            counts.iou_sum += iou;
            gt_segs.get_mut(&g).unwrap().matched = true;
            pred_segs.get_mut(&p).unwrap().matched = true;
        }
    }

    for seg in &gt.segments {
        let state = &gt_segs[&seg.id];
        if !state.matched && !state.crowd {
            out.stats.entry(state.bucket).fn_ += 1;
            out.false_negatives.push(seg.id);
        }
    }

    for seg in &pred.segments {
        let state = &pred_segs[&seg.id];
        if state.matched {
            continue;
        }
        if !opts.strict && state.area > 0 {
            let mut covered = void_overlap(seg.id);
            for gseg in &gt.segments {
                let gs = &gt_segs[&gseg.id];
                if gs.crowd && compatible(gs.bucket, state.bucket) {
                    covered += hist.get(&pair_key(gseg.id, seg.id)).copied().unwrap_or(0);
                }
            }
            if covered as f64 / state.area as f64 > IOU_THRESHOLD {
                out.ignored.push(seg.id);
                continue;
            }
        }
        out.stats.entry(state.bucket).fp += 1;
        out.false_positives.push(seg.id);
    }

    Ok(out)
}

/// Convenience wrapper returning only the counts.
pub fn match_stats(
    gt: &PanopticAnnotation,
    pred: &PanopticAnnotation,
    registry: &CategoryRegistry,
    opts: MatchOptions,
) -> Result<MatchStats> {
    match_image(gt, pred, registry, opts).map(|m| m.stats)
}

/// Matches every ground-truth image against the prediction with the same
/// image id, in parallel on the current rayon pool, and folds the results in
/// ground-truth order so the sums do not depend on the worker count.
pub fn evaluate(
    gt: &[PanopticAnnotation],
    pred: &[PanopticAnnotation],
    registry: &CategoryRegistry,
    opts: MatchOptions,
) -> Result<MatchStats> {
    let by_id: HashMap<u64, &PanopticAnnotation> = pred.iter().map(|p| (p.image_id, p)).collect();
    if by_id.len() != pred.len() {
        return Err(Error::Invalid("duplicate image id among predictions".into()));
    }
    let per_image: Vec<Result<MatchStats>> = gt
        .par_iter()
        .map(|g| {
            let p = by_id.get(&g.image_id).ok_or_else(|| {
                Error::Invalid(format!("no prediction for image {}", g.image_id))
            })?;
            match_stats(g, p, registry, opts)
        })
        .collect();
    let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(accumulate(&per_image))
}

/// Quality numbers for one category or one group of categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QualityRow {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub recall: f64,
    pub precision: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Number of categories averaged (1 for a category row).
    pub n: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl QualityRow {
    pub fn from_counts(c: &CategoryCounts) -> Self {
        let tp = c.tp as f64;
        let sq = ratio(c.iou_sum, tp);
        let rq = ratio(tp, tp + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64);
        Self {
            pq: sq * rq,
            sq,
            rq,
            recall: ratio(tp, (c.tp + c.fn_) as f64),
            precision: ratio(tp, (c.tp + c.fp) as f64),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            n: 1,
        }
    }

    /// Unweighted mean of the quality values; counts are summed.
    pub fn mean<'a>(rows: impl IntoIterator<Item = &'a QualityRow>) -> Self {
        let mut out = QualityRow::default();
        for r in rows {
            out.pq += r.pq;
            out.sq += r.sq;
            out.rq += r.rq;
            out.recall += r.recall;
            out.precision += r.precision;
            out.tp += r.tp;
            out.fp += r.fp;
            out.fn_ += r.fn_;
            out.n += 1;
        }
        if out.n > 0 {
            let n = out.n as f64;
            out.pq /= n;
            out.sq /= n;
            out.rq /= n;
            out.recall /= n;
            out.precision /= n;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Known,
    KnownThing,
    KnownStuff,
    Unknown,
    Unseen,
    All,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Known,
        Group::KnownThing,
        Group::KnownStuff,
        Group::Unknown,
        Group::Unseen,
        Group::All,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Group::Known => "known",
            Group::KnownThing => "known-thing",
            Group::KnownStuff => "known-stuff",
            Group::Unknown => "unknown",
            Group::Unseen => "unseen",
            Group::All => "all",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryRow {
    pub category_id: CategoryId,
    pub name: String,
    pub status: Status,
    #[serde(skip)]
    pub kind: Option<Kind>,
    #[serde(flatten)]
    pub row: QualityRow,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupRow {
    pub group: Group,
    #[serde(flatten)]
    pub row: QualityRow,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub categories: Vec<CategoryRow>,
    pub groups: Vec<GroupRow>,
}

impl MetricReport {
    pub fn group(&self, group: Group) -> Option<&QualityRow> {
        self.groups.iter().find(|g| g.group == group).map(|g| &g.row)
    }

    pub fn category(&self, id: CategoryId) -> Option<&QualityRow> {
        self.categories
            .iter()
            .find(|c| c.category_id == id)
            .map(|c| &c.row)
    }
}

fn describe(id: CategoryId, registry: &CategoryRegistry) -> (String, Status, Option<Kind>) {
    if id == UNKNOWN_CATEGORY {
        return ("unknown".into(), Status::Unknown, Some(Kind::Thing));
    }
    if id == UNSEEN_CATEGORY {
        return ("unseen".into(), Status::Unseen, Some(Kind::Thing));
    }
    match registry.get(id) {
        Some(c) => (c.name.clone(), c.status, Some(c.kind)),
        None => (format!("category-{id}"), Status::Known, None),
    }
}

fn in_group(group: Group, status: Status, kind: Option<Kind>) -> bool {
    match group {
        Group::Known => status == Status::Known,
        Group::KnownThing => status == Status::Known && kind == Some(Kind::Thing),
        Group::KnownStuff => status == Status::Known && kind == Some(Kind::Stuff),
        Group::Unknown => status == Status::Unknown,
        Group::Unseen => status == Status::Unseen,
        Group::All => true,
    }
}

/// Computes per-category and per-group quality. Only categories with at least
/// one TP, FP or FN contribute to group means.
pub fn report(stats: &MatchStats, registry: &CategoryRegistry) -> MetricReport {
    let mut categories = Vec::new();
    let mut tagged = Vec::new();
    for (id, counts) in stats.iter() {
        if counts.is_empty() {
            continue;
        }
        let (name, status, kind) = describe(id, registry);
        let row = QualityRow::from_counts(counts);
        tagged.push((status, kind, row));
        categories.push(CategoryRow {
            category_id: id,
            name,
            status,
            kind,
            row,
        });
    }
    let groups = Group::ALL
        .iter()
        .map(|&group| GroupRow {
            group,
            row: QualityRow::mean(
                tagged
                    .iter()
                    .filter(|(s, k, _)| in_group(group, *s, *k))
                    .map(|(_, _, r)| r),
            ),
        })
        .collect();
    MetricReport { categories, groups }
}

pub fn f1(recall: f64, precision: f64) -> f64 {
    ratio(2.0 * recall * precision, recall + precision)
}

/// One row of reported numbers: (PQ, SQ, RQ, recall, precision).
pub type ReportedRow = (f64, f64, f64, f64, f64);

/// Deviations of a reported row from the PQ = SQ·RQ and RQ = F1(R, P)
/// identities, in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Deviation {
    pub pq_vs_sq_rq: f64,
    pub rq_vs_f1: f64,
}

/// Checks reported rows against the PQ/SQ/RQ identities. Rows are on the
/// percent scale if any value exceeds 1, otherwise on the unit scale.
pub fn consistency_check(rows: &[ReportedRow]) -> Vec<Deviation> {
    rows.iter()
        .map(|&(pq, sq, rq, r, p)| {
            let percent = [pq, sq, rq, r, p].iter().any(|v| v.abs() > 1.0);
            let scale = if percent { 1.0 } else { 100.0 };
            let (pq, sq, rq, r, p) = (pq * scale, sq * scale, rq * scale, r * scale, p * scale);
            Deviation {
                pq_vs_sq_rq: (pq - sq * rq / 100.0).abs(),
                rq_vs_f1: (rq - f1(r, p)).abs(),
            }
        })
        .collect()
}

/// Renders group rows as an aligned table with values ×100, one decimal.
pub fn format_table(report: &MetricReport, groups: &[Group], per_category: bool) -> String {
    let mut out = String::new();
    let header = format!(
        "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8} {:>4}",
        "", "PQ", "SQ", "RQ", "R", "P", "TP", "FP", "FN", "N"
    );
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    let line = |out: &mut String, label: &str, r: &QualityRow| {
        if r.n == 0 {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8} {:>4}",
                label, "-", "-", "-", "-", "-", 0, 0, 0, 0
            );
            return;
        }
        let _ = writeln!(
            out,
            "{:<16} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>8} {:>8} {:>8} {:>4}",
            label,
            100.0 * r.pq,
            100.0 * r.sq,
            100.0 * r.rq,
            100.0 * r.recall,
            100.0 * r.precision,
            r.tp,
            r.fp,
            r.fn_,
            r.n
        );
    };
    for g in &report.groups {
        if groups.contains(&g.group) {
            line(&mut out, g.group.label(), &g.row);
        }
    }
    if per_category {
        let _ = writeln!(out);
        for c in &report.categories {
            let group_ok = groups.iter().any(|&g| in_group(g, c.status, c.kind));
            if group_ok {
                let label: String = format!("{} {}", c.category_id, c.name)
                    .chars()
                    .take(16)
                    .collect();
                line(&mut out, &label, &c.row);
            }
        }
    }
    out
}
