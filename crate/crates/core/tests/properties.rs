use opseg_core::coco::coco_registry;
use opseg_core::decision::{decide, DecisionConfig, Outcome, Strategy as Rule};
use opseg_core::proposals::{
    label_proposals, label_void_components, pseudo_filter, Connectivity, LabelConfig, Proposal,
    Role, Scores,
};
use opseg_core::splits::{apply_split, make_split, make_zero_shot, TAIL_CLASSES};
use opseg_core::synth::{Scene, SceneConfig};
use opseg_core::{BBox, SegmentMap, Status, VOID};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scored(logits: Vec<f64>, obj: f64) -> Proposal {
    Proposal {
        scores: Some(Scores {
            logits,
            objectness: Some(obj),
        }),
        ..Proposal::new(0, BBox::new(0, 0, 1, 1))
    }
}

fn arb_logits() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(-6.0f64..6.0, 2..8), -6.0f64..6.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn raising_tau_known_only_moves_known_to_rejected(
        (logits, obj) in arb_logits(), a in 0.001f64..0.999, b in 0.001f64..0.999
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let p = [scored(logits, obj)];
        let cfg = |t| DecisionConfig { tau_known: t, ..DecisionConfig::new(Rule::Dual) };
        let v_lo = decide(&p, &cfg(lo)).unwrap()[0].outcome;
        let v_hi = decide(&p, &cfg(hi)).unwrap()[0].outcome;
        let known = |v: Outcome| matches!(v, Outcome::Known { .. });
        if known(v_hi) {
            prop_assert_eq!(v_lo, v_hi);
        }
        if !known(v_lo) {
            prop_assert_eq!(v_lo, v_hi);
        }
    }

    #[test]
    fn raising_tau_obj_never_creates_unknowns(
        (logits, obj) in arb_logits(), a in 0.001f64..0.999, b in 0.001f64..0.999
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let p = [scored(logits, obj)];
        let cfg = |t| DecisionConfig { tau_obj: t, ..DecisionConfig::new(Rule::Dual) };
        let v_lo = decide(&p, &cfg(lo)).unwrap()[0].outcome;
        let v_hi = decide(&p, &cfg(hi)).unwrap()[0].outcome;
        if v_hi == Outcome::Unknown {
            prop_assert_eq!(v_lo, Outcome::Unknown);
        }
    }

    #[test]
    fn logit_shift_does_not_change_verdicts((logits, obj) in arb_logits(), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let cfg = DecisionConfig::new(Rule::Dual);
        let a = decide(&[scored(logits, obj)], &cfg).unwrap()[0].outcome;
        let b = decide(&[scored(shifted, obj)], &cfg).unwrap()[0].outcome;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dual_with_tiny_tau_obj_matches_void_ignorance((logits, obj) in arb_logits(), t in 0.001f64..0.999) {
        let p = [scored(logits, obj)];
        let dual = DecisionConfig { tau_known: t, tau_obj: 1e-9, ..DecisionConfig::new(Rule::Dual) };
        let base = DecisionConfig { tau_known: t, ..DecisionConfig::new(Rule::VoidIgnorance) };
        prop_assert_eq!(decide(&p, &dual).unwrap()[0].outcome, decide(&p, &base).unwrap()[0].outcome);
    }

    #[test]
    fn pseudo_filter_is_monotone(objs in prop::collection::vec(-8.0f64..8.0, 0..40), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let props: Vec<Proposal> = objs.iter().map(|&o| scored(vec![0.0, 0.0], o)).collect();
        let (kept_lo, dropped_lo) = pseudo_filter(&props, lo).unwrap();
        let (kept_hi, _) = pseudo_filter(&props, hi).unwrap();
        prop_assert_eq!(kept_lo.len() + dropped_lo.len(), props.len());
        prop_assert!(kept_hi.len() <= kept_lo.len());
        for p in &kept_hi {
            prop_assert!(kept_lo.contains(p));
        }
    }

    #[test]
    fn void_components_partition_void(w in 1u32..24, h in 1u32..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..w * h).map(|_| if rng.gen_bool(0.4) { VOID } else { 1 }).collect();
        let map = SegmentMap::new(w, h, ids.clone()).unwrap();
        let (four, n4) = label_void_components(&map, Connectivity::Four);
        let (eight, n8) = label_void_components(&map, Connectivity::Eight);
        prop_assert!(n8 <= n4);
        for (i, (&l4, &l8)) in four.iter().zip(&eight).enumerate() {
            prop_assert_eq!(l4 == 0, ids[i] != VOID);
            prop_assert_eq!(l8 == 0, ids[i] != VOID);
        }
        // adjacent void pixels share a 4-component
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if x + 1 < w && four[i] != 0 && four[i + 1] != 0 {
                    prop_assert_eq!(four[i], four[i + 1]);
                }
                if y + 1 < h && four[i] != 0 && four[i + w as usize] != 0 {
                    prop_assert_eq!(four[i], four[i + w as usize]);
                }
            }
        }
        // every 4-component lies inside one 8-component
        let mut owner = std::collections::HashMap::new();
        for (&l4, &l8) in four.iter().zip(&eight) {
            if l4 != 0 {
                prop_assert_eq!(*owner.entry(l4).or_insert(l8), l8);
            }
        }
    }
}

#[test]
fn labels_partition_and_void_shrinks_monotonically() {
    let reg = coco_registry();
    let split = make_split(&reg, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = SceneConfig {
        width: 48,
        height: 40,
        ..SceneConfig::default()
    };
    for i in 0..60 {
        let gt = apply_split(&Scene::random(&mut rng, &cfg, &reg).render(i), &split).unwrap();
        let props: Vec<Proposal> = (0..30)
            .map(|_| {
                let w = rng.gen_range(1..=24);
                let h = rng.gen_range(1..=20);
                Proposal::new(i, BBox::new(rng.gen_range(0..=48 - w), rng.gen_range(0..=40 - h), w, h))
            })
            .collect();
        let labeled = label_proposals(&props, &gt, &split.registry, LabelConfig::default()).unwrap();
        assert_eq!(labeled.len(), props.len());
        for p in &labeled {
            if let Some(Role::Known { category_id }) = p.role {
                assert_eq!(split.registry.status(category_id), Some(Status::Known));
            }
        }

        // fill one void pixel at a time with a stuff id; void roles only vanish
        let mut shrunk = gt.clone();
        let stuff = reg.stuff().next().unwrap().id;
        let next_id = shrunk.segments.iter().map(|s| s.id).max().unwrap_or(0) + 1;
        let mut ids = shrunk.map.ids().to_vec();
        let void_px: Vec<usize> = (0..ids.len()).filter(|&k| ids[k] == VOID).collect();
        for &k in void_px.iter().take(void_px.len() / 2) {
            ids[k] = next_id;
        }
        if void_px.len() >= 2 {
            shrunk = opseg_core::PanopticAnnotation::from_map(
                i,
                SegmentMap::new(48, 40, ids).unwrap(),
                &shrunk
                    .segments
                    .iter()
                    .map(|s| (s.id, (s.category, s.crowd)))
                    .chain([(next_id, (stuff, false))])
                    .collect(),
            );
        }
        let relabeled = label_proposals(&props, &shrunk, &split.registry, LabelConfig::default()).unwrap();
        for (a, b) in labeled.iter().zip(&relabeled) {
            if b.role == Some(Role::Void) {
                assert_eq!(a.role, Some(Role::Void));
            }
        }
    }
}

#[test]
fn split_preserves_pixels_and_is_idempotent() {
    let reg = coco_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ratio in [5, 10, 20] {
        let split = make_split(&reg, ratio).unwrap();
        for i in 0..40 {
            let gt = Scene::random(&mut rng, &SceneConfig::default(), &reg).render(i);
            let once = apply_split(&gt, &split).unwrap();
            assert_eq!(apply_split(&once, &split).unwrap(), once);
            assert!(opseg_core::validate_annotation(&once).is_empty());
            let removed: u64 = gt
                .segments
                .iter()
                .filter(|s| split.removed_thing_ids.contains(&s.category))
                .map(|s| s.area)
                .sum();
            assert_eq!(once.map.void_count(), gt.map.void_count() + removed);
            let kept: Vec<_> = gt
                .segments
                .iter()
                .filter(|s| !split.removed_thing_ids.contains(&s.category))
                .cloned()
                .collect();
            assert_eq!(once.segments, kept);
        }
    }
}

#[test]
fn zero_shot_drops_every_tail_image() {
    let reg = coco_registry();
    let split5 = make_split(&reg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let anns: Vec<_> = (0..100)
        .map(|i| Scene::random(&mut rng, &SceneConfig::default(), &reg).render(i))
        .collect();
    let zs = make_zero_shot(&anns, &split5).unwrap();
    assert_eq!(zs.unseen_ids.len(), TAIL_CLASSES.len());
    assert!(zs.removed_thing_ids.is_disjoint(&zs.unseen_ids));
    for a in &anns {
        let has_tail = a.segments.iter().any(|s| zs.unseen_ids.contains(&s.category));
        assert_eq!(zs.dropped_image_ids.contains(&a.image_id), has_tail);
    }
    for id in &zs.unseen_ids {
        assert_eq!(zs.registry.status(*id), Some(Status::Unseen));
    }
    assert!(!zs.dropped_image_ids.is_empty());
}
