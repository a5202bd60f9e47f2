//! Proposal labeling against open-set ground truth, void-component
//! extraction and pseudo-label filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::types::{
    BBox, CategoryId, CategoryRegistry, Extent, ImageId, Kind, PanopticAnnotation, SegmentId,
    SegmentMap, Status, VOID,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Role {
    Known { category_id: CategoryId },
    Void,
    Background,
}

/// Head outputs for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Classification logits; the last entry is background.
    pub logits: Vec<f64>,
    /// Objectiveness logit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Scores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

impl Proposal {
    pub fn new(image_id: ImageId, bbox: BBox) -> Self {
        Self {
            image_id,
            bbox,
            role: None,
            scores: None,
            feature: None,
        }
    }

    /// Clips a possibly out-of-bounds box to the image. Returns `None` when
    /// nothing of positive area remains.
    pub fn clipped(
        image_id: ImageId,
        (x, y, w, h): (i64, i64, i64, i64),
        (width, height): (u32, u32),
    ) -> Option<Self> {
        let x0 = x.clamp(0, width as i64);
        let y0 = y.clamp(0, height as i64);
        let x1 = x.saturating_add(w).clamp(0, width as i64);
        let y1 = y.saturating_add(h).clamp(0, height as i64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(Self::new(
            image_id,
            BBox::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32),
        ))
    }

    pub fn objectness(&self) -> Option<f64> {
        self.scores.as_ref().and_then(|s| s.objectness)
    }
}

/// Thresholds used when labeling proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    /// Minimum box IoU with a known thing instance.
    pub known_iou: f64,
    /// Minimum fraction of box pixels on ground-truth void.
    pub void_fraction: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            known_iou: 0.5,
            void_fraction: 0.5,
        }
    }
}

/// Summed-area table of void pixels.
struct VoidIntegral {
    width: usize,
    sums: Vec<u64>,
}

impl VoidIntegral {
    fn new(map: &SegmentMap) -> Self {
        let (w, h) = (map.width() as usize, map.height() as usize);
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += (map.ids()[y * w + x] == VOID) as u64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { width: w, sums }
    }

    fn count(&self, b: &BBox) -> u64 {
        let stride = self.width + 1;
        let (x0, y0, x1, y1) = (b.x as usize, b.y as usize, b.x1() as usize, b.y1() as usize);
        self.sums[y1 * stride + x1] + self.sums[y0 * stride + x0]
            - self.sums[y0 * stride + x1]
            - self.sums[y1 * stride + x0]
    }
}

/// Assigns each proposal a known-class, void or background role.
///
/// Boxes are first compared with non-crowd known thing instances; the best
/// box IoU at or above `known_iou` wins, ties going to the smaller segment id.
/// Otherwise a box with at least `void_fraction` of its pixels on void is
/// void, and anything else is background. Boxes must lie inside the image.
pub fn label_proposals(
    props: &[Proposal],
    gt: &PanopticAnnotation,
    registry: &CategoryRegistry,
    cfg: LabelConfig,
) -> Result<Vec<Proposal>> {
    let (width, height) = gt.map.dims();
    let mut instances: Vec<(SegmentId, BBox, CategoryId)> = gt
        .segments
        .iter()
        .filter(|s| !s.crowd)
        .filter(|s| {
            registry
                .get(s.category)
                .is_some_and(|c| c.kind == Kind::Thing && c.status == Status::Known)
        })
        .map(|s| (s.id, s.bbox, s.category))
        .collect();
    instances.sort_by_key(|&(id, _, _)| id);

    let voids = VoidIntegral::new(&gt.map);
    props
        .iter()
        .map(|p| {
            let b = p.bbox;
            if b.area() == 0 || b.x1() > width || b.y1() > height {
                return Err(Error::Invalid(format!(
                    "proposal box {:?} is empty or outside the {width}x{height} image",
                    <[u32; 4]>::from(b)
                )));
            }
            let mut best: Option<(f64, CategoryId)> = None;
            for &(_, ib, cat) in &instances {
                let iou = b.iou(&ib);
                if iou >= cfg.known_iou && best.is_none_or(|(v, _)| iou > v) {
                    best = Some((iou, cat));
                }
            }
            let role = match best {
                Some((_, category_id)) => Role::Known { category_id },
                None => {
                    let frac = voids.count(&b) as f64 / b.area() as f64;
                    if frac >= cfg.void_fraction {
                        Role::Void
                    } else {
                        Role::Background
                    }
                }
            };
            Ok(Proposal {
                role: Some(role),
                ..p.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Labels connected void regions. Returns per-pixel labels (0 for non-void,
/// components numbered from 1 in raster order of their first pixel) and the
/// number of components.
pub fn label_void_components(map: &SegmentMap, conn: Connectivity) -> (Vec<u32>, u32) {
    let (w, h) = (map.width() as i64, map.height() as i64);
    let ids = map.ids();
    let mut labels = vec![0u32; ids.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    let offsets: &[(i64, i64)] = match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    for start in 0..ids.len() {
        if ids[start] != VOID || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i as i64 % w, i as i64 / w);
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if ids[j] == VOID && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    (labels, next)
}

/// One void proposal per connected void region, boxed tightly.
pub fn void_components(gt: &PanopticAnnotation, conn: Connectivity) -> Vec<Proposal> {
    let (labels, n) = label_void_components(&gt.map, conn);
    let w = gt.map.width() as usize;
    let mut extents: Vec<Option<Extent>> = vec![None; n as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        match &mut extents[l as usize - 1] {
            Some(e) => e.add(x, y),
            slot => *slot = Some(Extent::new(x, y)),
        }
    }
    extents
        .into_iter()
        .flatten()
        .map(|e| Proposal {
            role: Some(Role::Void),
            ..Proposal::new(gt.image_id, e.bbox())
        })
        .collect()
}

/// Splits proposals into those whose objectiveness `σ(logit) ≥ delta` and
/// the rest, preserving order.
pub fn pseudo_filter(props: &[Proposal], delta: f64) -> Result<(Vec<Proposal>, Vec<Proposal>)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!("delta {delta} is not in (0, 1)")));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (index, p) in props.iter().enumerate() {
        let logit = p.objectness().ok_or(Error::MissingScore {
            index,
            what: "an objectiveness logit",
        })?;
        if sigmoid(logit) >= delta {
            kept.push(p.clone());
        } else {
            dropped.push(p.clone());
        }
    }
    Ok((kept, dropped))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::types::Category;

    fn registry() -> CategoryRegistry {
        CategoryRegistry::new(vec![
            Category {
                id: CategoryId(3),
                name: "car".into(),
                kind: Kind::Thing,
                status: Status::Known,
            },
            Category {
                id: CategoryId(149),
                name: "road".into(),
                kind: Kind::Stuff,
                status: Status::Known,
            },
        ])
        .unwrap()
    }

    /// 10x10 image: car at (0,0,4,4), void at x >= 6, road elsewhere.
    fn scene() -> PanopticAnnotation {
        let mut map = SegmentMap::filled(10, 10, 2);
        for y in 0..10 {
            for x in 0..10 {
                if x < 4 && y < 4 {
                    map.set(x, y, 1);
                } else if x >= 6 {
                    map.set(x, y, VOID);
                }
            }
        }
        let labels = BTreeMap::from([
            (1, (CategoryId(3), false)),
            (2, (CategoryId(149), false)),
        ]);
        PanopticAnnotation::from_map(1, map, &labels)
    }

    fn scored(logit: f64) -> Proposal {
        Proposal {
            scores: Some(Scores {
                logits: vec![0.0],
                objectness: Some(logit),
            }),
            ..Proposal::new(1, BBox::new(0, 0, 1, 1))
        }
    }

    #[test]
    fn labeling_examples() {
        let props = vec![
            Proposal::new(1, BBox::new(0, 0, 4, 4)),
            Proposal::new(1, BBox::new(6, 0, 4, 10)),
            // columns 3..8: two of five are void (40%), no car overlap
            Proposal::new(1, BBox::new(3, 5, 5, 5)),
        ];
        let out = label_proposals(&props, &scene(), &registry(), LabelConfig::default()).unwrap();
        let roles: Vec<Role> = out.iter().map(|p| p.role.unwrap()).collect();
        assert_eq!(
            roles,
            vec![
                Role::Known {
                    category_id: CategoryId(3)
                },
                Role::Void,
                Role::Background
            ]
        );
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let props = vec![Proposal::new(1, BBox::new(8, 8, 4, 4))];
        assert!(label_proposals(&props, &scene(), &registry(), LabelConfig::default()).is_err());
    }

    #[test]
    fn clipping() {
        let p = Proposal::clipped(1, (-2, -2, 5, 5), (10, 10)).unwrap();
        assert_eq!(p.bbox, BBox::new(0, 0, 3, 3));
        assert!(Proposal::clipped(1, (12, 0, 3, 3), (10, 10)).is_none());
    }

    #[test]
    fn single_void_block() {
        let mut map = SegmentMap::filled(6, 6, 1);
        for y in 1..4 {
            for x in 2..5 {
                map.set(x, y, VOID);
            }
        }
        let ann =
            PanopticAnnotation::from_map(1, map, &BTreeMap::from([(1, (CategoryId(149), false))]));
        let comps = void_components(&ann, Connectivity::Four);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].bbox, BBox::new(2, 1, 3, 3));
        assert_eq!(comps[0].role, Some(Role::Void));
    }

    #[test]
    fn diagonal_void_pixels_are_separate() {
        let map = SegmentMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let ann =
            PanopticAnnotation::from_map(1, map, &BTreeMap::from([(1, (CategoryId(149), false))]));
        assert_eq!(void_components(&ann, Connectivity::Four).len(), 2);
        assert_eq!(void_components(&ann, Connectivity::Eight).len(), 1);
        let full = PanopticAnnotation::from_map(
            1,
            SegmentMap::filled(3, 3, 1),
            &BTreeMap::from([(1, (CategoryId(149), false))]),
        );
        assert!(void_components(&full, Connectivity::Four).is_empty());
    }

    #[test]
    fn pseudo_filter_boundary() {
        let (k, d) = pseudo_filter(&[scored(0.0)], 0.5).unwrap();
        assert_eq!((k.len(), d.len()), (1, 0));
        let (k, d) = pseudo_filter(&[scored(0.0)], 0.6).unwrap();
        assert_eq!((k.len(), d.len()), (0, 1));
        // σ(3) = 0.95257..., evaluated directly.
        let direct = 1.0 / (1.0 + (-3.0f64).exp());
        assert!(direct >= 0.95);
        let (k, _) = pseudo_filter(&[scored(3.0)], 0.95).unwrap();
        assert_eq!(k.len(), 1);
    }

    #[test]
    fn pseudo_filter_needs_scores() {
        let p = Proposal::new(1, BBox::new(0, 0, 1, 1));
        assert!(matches!(
            pseudo_filter(&[p], 0.5),
            Err(Error::MissingScore { index: 0, .. })
        ));
    }

    #[test]
    fn proposal_json_shape() {
        let p = Proposal {
            role: Some(Role::Known {
                category_id: CategoryId(3),
            }),
            ..Proposal::new(4, BBox::new(1, 2, 3, 4))
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"image_id":4,"box":[1,2,3,4],"role":{"kind":"known","category_id":3}}"#
        );
        assert_eq!(serde_json::from_str::<Proposal>(&s).unwrap(), p);
    }
}
