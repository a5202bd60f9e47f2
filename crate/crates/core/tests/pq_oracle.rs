mod support;

use std::collections::{BTreeMap, BTreeSet};

use opseg_core::pq::{
    accumulate, f1, match_image, report, CategoryCounts, MatchOptions, MatchStats,
};
use opseg_core::{CategoryId, PanopticAnnotation, UNKNOWN_CATEGORY};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{assert_stats_eq, brute_force_match, mixed_registry, perturbed_prediction, random_annotation};

const MODES: [MatchOptions; 3] = [
    MatchOptions {
        strict: false,
        open_set: true,
    },
    MatchOptions {
        strict: false,
        open_set: false,
    },
    MatchOptions {
        strict: true,
        open_set: true,
    },
];

fn random_pair(rng: &mut ChaCha8Rng, size: u32) -> (PanopticAnnotation, PanopticAnnotation) {
    let cats = [CategoryId(1), CategoryId(2), CategoryId(3), CategoryId(4)];
    let pred_cats = [CategoryId(1), CategoryId(2), CategoryId(3), UNKNOWN_CATEGORY];
    let w = rng.gen_range(1..=size);
    let h = rng.gen_range(1..=size);
    let gt = random_annotation(rng, w, h, 6, &cats, 0.2);
    let pred = if rng.gen_bool(0.6) {
        perturbed_prediction(rng, &gt, &pred_cats)
    } else {
        random_annotation(rng, w, h, 6, &pred_cats, 0.0)
    };
    (gt, pred)
}

#[test]
fn engine_matches_brute_force_on_16x16() {
    let reg = mixed_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut tp, mut fp, mut fn_, mut ignored) = (0, 0, 0, 0);
    for _ in 0..400 {
        let (gt, pred) = random_pair(&mut rng, 16);
        for opts in MODES {
            let fast = match_image(&gt, &pred, &reg, opts).unwrap();
            let slow = brute_force_match(&gt, &pred, &reg, opts);
            assert_stats_eq(&fast.stats, &slow.stats, 1e-12);
            let t = fast.stats.totals();
            (tp, fp, fn_) = (tp + t.tp, fp + t.fp, fn_ + t.fn_);
            ignored += fast.ignored.len();
        }
    }
    // the corpus must exercise every outcome
    assert!(tp > 100 && fp > 100 && fn_ > 100 && ignored > 10, "{tp} {fp} {fn_} {ignored}");
}

#[test]
fn matches_are_unique() {
    let reg = mixed_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let (gt, pred) = random_pair(&mut rng, 24);
        for opts in MODES {
            let m = match_image(&gt, &pred, &reg, opts).unwrap();
            let gts: BTreeSet<u32> = m.pairs.iter().map(|p| p.gt).collect();
            let preds: BTreeSet<u32> = m.pairs.iter().map(|p| p.pred).collect();
            assert_eq!(gts.len(), m.pairs.len());
            assert_eq!(preds.len(), m.pairs.len());
            let oracle = brute_force_match(&gt, &pred, &reg, opts);
            assert_eq!(oracle.pairs.len(), m.pairs.len());
        }
    }
}

fn renumber(ann: &PanopticAnnotation, rng: &mut ChaCha8Rng) -> PanopticAnnotation {
    let mut mapping = BTreeMap::new();
    let mut used = BTreeSet::new();
    for s in &ann.segments {
        let id = loop {
            let id = rng.gen_range(1..(1u32 << 24));
            if used.insert(id) {
                break id;
            }
        };
        mapping.insert(s.id, id);
    }
    let mut out = ann.clone();
    for px in out.map.ids_mut() {
        if let Some(&id) = mapping.get(px) {
            *px = id;
        }
    }
    for s in &mut out.segments {
        s.id = mapping[&s.id];
    }
    out
}

#[test]
fn renumbering_does_not_change_stats() {
    let reg = mixed_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let (gt, pred) = random_pair(&mut rng, 20);
        let base = match_image(&gt, &pred, &reg, MatchOptions::default()).unwrap();
        let gt2 = renumber(&gt, &mut rng);
        let pred2 = renumber(&pred, &mut rng);
        let other = match_image(&gt2, &pred2, &reg, MatchOptions::default()).unwrap();
        assert_stats_eq(&base.stats, &other.stats, 1e-12);
    }
}

#[test]
fn perfect_prediction_limit() {
    let reg = mixed_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (gt, _) = random_pair(&mut rng, 20);
        let m = match_image(&gt, &gt, &reg, MatchOptions::default()).unwrap();
        for (_, c) in m.stats.iter() {
            assert_eq!((c.fp, c.fn_), (0, 0));
            assert_eq!(c.iou_sum, c.tp as f64);
        }
        let rep = report(&m.stats, &reg);
        for row in &rep.categories {
            assert_eq!(row.row.sq, 1.0);
        }
    }
}

#[test]
fn report_rows_obey_identities() {
    let reg = mixed_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stats: Vec<MatchStats> = (0..100)
        .map(|_| {
            let (gt, pred) = random_pair(&mut rng, 16);
            match_image(&gt, &pred, &reg, MatchOptions::default()).unwrap().stats
        })
        .collect();
    let total = accumulate(&stats);
    for (_, c) in total.iter() {
        assert!(c.iou_sum <= c.tp as f64 + 1e-12);
        assert!(c.tp == 0 || c.iou_sum > 0.5 * c.tp as f64);
    }
    let rep = report(&total, &reg);
    for row in rep.categories.iter().map(|c| c.row) {
        assert!((row.pq - row.sq * row.rq).abs() < 1e-15);
        if row.tp + row.fp > 0 && row.tp + row.fn_ > 0 {
            assert!((row.rq - f1(row.recall, row.precision)).abs() < 1e-12);
        }
    }
}

fn arb_counts() -> impl Strategy<Value = MatchStats> {
    prop::collection::vec((1u32..6, 0u64..20, 0u64..20, 0u64..20, 0.0f64..1.0), 0..6).prop_map(
        |rows| {
            let mut s = MatchStats::new();
            for (cat, tp, fp, fn_, q) in rows {
                let e = s.entry(CategoryId(cat));
                *e = CategoryCounts {
                    tp: e.tp + tp,
                    fp: e.fp + fp,
                    fn_: e.fn_ + fn_,
                    iou_sum: e.iou_sum + tp as f64 * (0.5 + 0.5 * q),
                };
            }
            s
        },
    )
}

proptest! {
    #[test]
    fn accumulate_commutes_and_associates(a in arb_counts(), b in arb_counts(), c in arb_counts()) {
        assert_stats_eq(&accumulate(&[a.clone(), b.clone()]), &accumulate(&[b.clone(), a.clone()]), 1e-12);
        let left = accumulate(&[a.clone(), accumulate(&[b.clone(), c.clone()])]);
        let right = accumulate(&[accumulate(&[a.clone(), b.clone()]), c.clone()]);
        assert_stats_eq(&left, &right, 1e-12);
    }
}
