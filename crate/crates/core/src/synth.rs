//! Synthetic panoptic scenes for benchmarks and pipeline tests.
//!
//! A scene is a stack of horizontal stuff bands, thing rectangles painted in
//! order (later rectangles cover earlier ones) and void rectangles painted
//! last.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::types::{BBox, CategoryId, CategoryRegistry, ImageId, PanopticAnnotation, SegmentMap, VOID};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub bbox: BBox,
    pub category: CategoryId,
    pub crowd: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    /// `(first row, category)`; each band runs to the next band's first row.
    pub bands: Vec<(u32, CategoryId)>,
    pub things: Vec<Rect>,
    pub voids: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub max_bands: usize,
    pub max_things: usize,
    pub max_voids: usize,
    pub crowd_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            max_bands: 3,
            max_things: 8,
            max_voids: 2,
            crowd_prob: 0.05,
        }
    }
}

fn random_box<R: Rng>(rng: &mut R, width: u32, height: u32) -> BBox {
    let w = rng.gen_range(1..=(width / 2).max(1));
    let h = rng.gen_range(1..=(height / 2).max(1));
    let x = rng.gen_range(0..=width - w);
    let y = rng.gen_range(0..=height - h);
    BBox::new(x, y, w, h)
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R, cfg: &SceneConfig, registry: &CategoryRegistry) -> Self {
        let things: Vec<CategoryId> = registry.things().map(|c| c.id).collect();
        let stuff: Vec<CategoryId> = registry.stuff().map(|c| c.id).collect();

        let mut bands = Vec::new();
        if !stuff.is_empty() && cfg.max_bands > 0 {
            let n = rng.gen_range(1..=cfg.max_bands);
            let mut rows: Vec<u32> = (0..n - 1).map(|_| rng.gen_range(1..cfg.height.max(2))).collect();
            rows.push(0);
            rows.sort_unstable();
            rows.dedup();
            bands = rows
                .into_iter()
                .map(|r| (r, *stuff.choose(rng).unwrap()))
                .collect();
        }

        let mut rects = Vec::new();
        if !things.is_empty() && cfg.max_things > 0 {
            for _ in 0..rng.gen_range(0..=cfg.max_things) {
                rects.push(Rect {
                    bbox: random_box(rng, cfg.width, cfg.height),
                    category: *things.choose(rng).unwrap(),
                    crowd: rng.gen_bool(cfg.crowd_prob),
                });
            }
        }

        let voids = (0..rng.gen_range(0..=cfg.max_voids))
            .map(|_| random_box(rng, cfg.width / 2, cfg.height / 2))
            .collect();

        Self {
            width: cfg.width,
            height: cfg.height,
            bands,
            things: rects,
            voids,
        }
    }

    /// Rasterizes the scene. Bands get ids 1.., things follow; occluded
    /// segments are dropped.
    pub fn render(&self, image_id: ImageId) -> PanopticAnnotation {
        let mut map = SegmentMap::filled(self.width, self.height, VOID);
        let mut labels = BTreeMap::new();
        let mut next = 1u32;
        for (i, &(row, cat)) in self.bands.iter().enumerate() {
            let end = self.bands.get(i + 1).map_or(self.height, |b| b.0);
            for y in row..end {
                for x in 0..self.width {
                    map.set(x, y, next);
                }
            }
            labels.insert(next, (cat, false));
            next += 1;
        }
        for r in &self.things {
            paint(&mut map, &r.bbox, next);
            labels.insert(next, (r.category, r.crowd));
            next += 1;
        }
        for v in &self.voids {
            paint(&mut map, v, VOID);
        }
        PanopticAnnotation::from_map(image_id, map, &labels)
    }

    /// A noisy copy standing in for a model prediction: things shift by up to
    /// `jitter` pixels, some are dropped or relabeled, spurious ones appear,
    /// and void areas disappear.
    pub fn perturb<R: Rng>(&self, rng: &mut R, jitter: u32, registry: &CategoryRegistry) -> Scene {
        let things: Vec<CategoryId> = registry.things().map(|c| c.id).collect();
        let j = jitter as i64;
        let mut out = Vec::new();
        for r in &self.things {
            if rng.gen_bool(0.1) {
                continue;
            }
            let dx = rng.gen_range(-j..=j);
            let dy = rng.gen_range(-j..=j);
            let x = (r.bbox.x as i64 + dx).clamp(0, (self.width - r.bbox.w) as i64) as u32;
            let y = (r.bbox.y as i64 + dy).clamp(0, (self.height - r.bbox.h) as i64) as u32;
            let category = if rng.gen_bool(0.1) && !things.is_empty() {
                *things.choose(rng).unwrap()
            } else {
                r.category
            };
            out.push(Rect {
                bbox: BBox::new(x, y, r.bbox.w, r.bbox.h),
                category,
                crowd: false,
            });
        }
        if rng.gen_bool(0.3) && !things.is_empty() {
            out.push(Rect {
                bbox: random_box(rng, self.width, self.height),
                category: *things.choose(rng).unwrap(),
                crowd: false,
            });
        }
        Scene {
            width: self.width,
            height: self.height,
            bands: self.bands.clone(),
            things: out,
            voids: Vec::new(),
        }
    }
}

fn paint(map: &mut SegmentMap, b: &BBox, id: u32) {
    for y in b.y..b.y1().min(map.height()) {
        for x in b.x..b.x1().min(map.width()) {
            map.set(x, y, id);
        }
    }
}
