//! Test-only oracles and random fixtures shared by the integration suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use opseg_core::pq::{CategoryCounts, MatchOptions, MatchStats};
use opseg_core::{
    BBox, Category, CategoryId, CategoryRegistry, Kind, PanopticAnnotation, SegmentMap, Status,
    UNKNOWN_CATEGORY, UNSEEN_CATEGORY,
};
use rand::Rng;

/// Four categories: known thing, known stuff, unknown thing, unseen thing.
pub fn mixed_registry() -> CategoryRegistry {
    let cat = |id, kind, status| Category {
        id: CategoryId(id),
        name: format!("c{id}"),
        kind,
        status,
    };
    CategoryRegistry::new(vec![
        cat(1, Kind::Thing, Status::Known),
        cat(2, Kind::Stuff, Status::Known),
        cat(3, Kind::Thing, Status::Unknown),
        cat(4, Kind::Thing, Status::Unseen),
    ])
    .unwrap()
}

fn random_rect<R: Rng>(rng: &mut R, w: u32, h: u32) -> BBox {
    let bw = rng.gen_range(1..=w);
    let bh = rng.gen_range(1..=h);
    BBox::new(rng.gen_range(0..=w - bw), rng.gen_range(0..=h - bh), bw, bh)
}

/// Random annotation: up to `max_segments` rectangles with random ids in
/// [1, 2^24) over a void canvas, plus salt noise.
pub fn random_annotation<R: Rng>(
    rng: &mut R,
    w: u32,
    h: u32,
    max_segments: usize,
    categories: &[CategoryId],
    crowd_prob: f64,
) -> PanopticAnnotation {
    let mut map = SegmentMap::filled(w, h, 0);
    let mut labels = BTreeMap::new();
    let n = rng.gen_range(0..=max_segments);
    let mut rects = Vec::new();
    for _ in 0..n {
        let id = loop {
            let id = rng.gen_range(1..(1u32 << 24));
            if !labels.contains_key(&id) {
                break id;
            }
        };
        let cat = categories[rng.gen_range(0..categories.len())];
        labels.insert(id, (cat, rng.gen_bool(crowd_prob)));
        rects.push((id, random_rect(rng, w, h)));
    }
    for &(id, r) in &rects {
        for y in r.y..r.y1() {
            for x in r.x..r.x1() {
                map.set(x, y, id);
            }
        }
    }
    // sprinkle a few pixels to break perfect rectangles
    let ids: Vec<u32> = std::iter::once(0).chain(rects.iter().map(|r| r.0)).collect();
    for _ in 0..rng.gen_range(0..=(w * h / 8)) {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        map.set(x, y, ids[rng.gen_range(0..ids.len())]);
    }
    PanopticAnnotation::from_map(0, map, &labels)
}

/// Prediction derived from `gt`: each segment's pixels shift by a small
/// offset, categories are sometimes flipped, ids are renumbered.
pub fn perturbed_prediction<R: Rng>(
    rng: &mut R,
    gt: &PanopticAnnotation,
    categories: &[CategoryId],
) -> PanopticAnnotation {
    let (w, h) = gt.map.dims();
    let mut map = SegmentMap::filled(w, h, 0);
    let mut labels = BTreeMap::new();
    let mut new_ids = BTreeMap::new();
    for seg in &gt.segments {
        let id = rng.gen_range(1..(1u32 << 24));
        if labels.contains_key(&id) {
            continue;
        }
        new_ids.insert(seg.id, id);
        let cat = if rng.gen_bool(0.2) {
            categories[rng.gen_range(0..categories.len())]
        } else {
            seg.category
        };
        labels.insert(id, (cat, false));
    }
    let (dx, dy) = (rng.gen_range(-1i64..=1), rng.gen_range(-1i64..=1));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x as i64 - dx, y as i64 - dy);
            if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                continue;
            }
            let g = gt.map.get(sx as u32, sy as u32);
            if let Some(&id) = new_ids.get(&g) {
                map.set(x, y, id);
            }
        }
    }
    for _ in 0..rng.gen_range(0..=(w * h / 10)) {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        map.set(x, y, 0);
    }
    PanopticAnnotation::from_map(gt.image_id, map, &labels)
}

/// Open-set scoring buckets, restated independently of the engine.
fn oracle_gt_cat(c: CategoryId, reg: &CategoryRegistry, open_set: bool) -> CategoryId {
    if !open_set || c == UNKNOWN_CATEGORY {
        return c;
    }
    match reg.get(c).unwrap().status {
        Status::Known => c,
        Status::Unknown => UNKNOWN_CATEGORY,
        Status::Unseen => UNSEEN_CATEGORY,
    }
}

fn oracle_pred_cat(c: CategoryId, reg: &CategoryRegistry, open_set: bool) -> CategoryId {
    if !open_set || c == UNKNOWN_CATEGORY {
        return c;
    }
    match reg.get(c).unwrap().status {
        Status::Known => c,
        _ => UNKNOWN_CATEGORY,
    }
}

fn oracle_same(g: CategoryId, p: CategoryId) -> bool {
    g == p || (g == UNSEEN_CATEGORY && p == UNKNOWN_CATEGORY)
}

pub struct OracleResult {
    pub stats: MatchStats,
    /// Every (gt id, pred id, iou) with IoU > 0.5, before any uniqueness
    /// filtering.
    pub pairs: Vec<(u32, u32, f64)>,
}

/// Brute-force matcher: enumerates every (gt, pred) pair with compatible
/// categories and measures intersection, union and void overlap by scanning
/// all pixels for that pair.
pub fn brute_force_match(
    gt: &PanopticAnnotation,
    pred: &PanopticAnnotation,
    reg: &CategoryRegistry,
    opts: MatchOptions,
) -> OracleResult {
    let g_ids = gt.map.ids();
    let p_ids = pred.map.ids();
    let count = |f: &dyn Fn(u32, u32) -> bool| -> u64 {
        g_ids.iter().zip(p_ids).filter(|(&g, &p)| f(g, p)).count() as u64
    };
    let crowd = |id: u32| !opts.strict && gt.segment(id).unwrap().crowd;

    let mut pairs = Vec::new();
    for gs in &gt.segments {
        if crowd(gs.id) {
            continue;
        }
        let gc = oracle_gt_cat(gs.category, reg, opts.open_set);
        for ps in &pred.segments {
            let pc = oracle_pred_cat(ps.category, reg, opts.open_set);
            if !oracle_same(gc, pc) {
                continue;
            }
            let inter = count(&|g, p| g == gs.id && p == ps.id);
            if inter == 0 {
                continue;
            }
            let union = count(&|g, p| {
                let in_union = g == gs.id || p == ps.id;
                let on_void = g == 0 && p == ps.id;
                in_union && !(on_void && !opts.strict)
            });
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                pairs.push((gs.id, ps.id, iou));
            }
        }
    }

    let mut stats = MatchStats::new();
    for &(g, _, iou) in &pairs {
        let c = oracle_gt_cat(gt.segment(g).unwrap().category, reg, opts.open_set);
        let e: &mut CategoryCounts = stats.entry(c);
        e.tp += 1;
        e.iou_sum += iou;
    }
    for gs in &gt.segments {
        if crowd(gs.id) || pairs.iter().any(|&(g, _, _)| g == gs.id) {
            continue;
        }
        stats
            .entry(oracle_gt_cat(gs.category, reg, opts.open_set))
            .fn_ += 1;
    }
    for ps in &pred.segments {
        if pairs.iter().any(|&(_, p, _)| p == ps.id) {
            continue;
        }
        let pc = oracle_pred_cat(ps.category, reg, opts.open_set);
        if !opts.strict {
            let area = count(&|_, p| p == ps.id);
            let forgiven = count(&|g, p| {
                p == ps.id
                    && (g == 0
                        || gt.segment(g).is_some_and(|s| {
                            s.crowd && oracle_same(oracle_gt_cat(s.category, reg, opts.open_set), pc)
                        }))
            });
            if forgiven as f64 / area as f64 > 0.5 {
                continue;
            }
        }
        stats.entry(pc).fp += 1;
    }
    OracleResult { stats, pairs }
}

/// Asserts equal counts and iou sums within `tol`.
pub fn assert_stats_eq(a: &MatchStats, b: &MatchStats, tol: f64) {
    let keys: std::collections::BTreeSet<CategoryId> =
        a.iter().map(|(c, _)| c).chain(b.iter().map(|(c, _)| c)).collect();
    for c in keys {
        let (x, y) = (a.get(c), b.get(c));
        assert_eq!((x.tp, x.fp, x.fn_), (y.tp, y.fp, y.fn_), "category {c}");
        assert!((x.iou_sum - y.iou_sum).abs() <= tol, "category {c}: {} vs {}", x.iou_sum, y.iou_sum);
    }
}
