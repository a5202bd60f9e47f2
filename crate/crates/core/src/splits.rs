//! Open-set dataset variants: K% known/unknown splits and the zero-shot setting.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::coco;
use crate::error::{Error, Result};
use crate::types::{CategoryId, CategoryRegistry, ImageId, Kind, PanopticAnnotation, Status, VOID};

/// Classes removed at K=5. Larger ratios extend this list.
pub const UNKNOWN_K5: [&str; 4] = ["car", "cow", "pizza", "toilet"];
pub const UNKNOWN_K10_EXTRA: [&str; 4] = ["boat", "tie", "zebra", "stop sign"];
pub const UNKNOWN_K20_EXTRA: [&str; 8] = [
    "dining table",
    "banana",
    "bicycle",
    "cake",
    "sink",
    "cat",
    "keyboard",
    "bear",
];

/// Tail thing classes that never appear in zero-shot training images.
pub const TAIL_CLASSES: [&str; 16] = [
    "hair drier",
    "toaster",
    "parking meter",
    "bear",
    "scissors",
    "microwave",
    "fire hydrant",
    "toothbrush",
    "stop sign",
    "mouse",
    "refrigerator",
    "snowboard",
    "frisbee",
    "keyboard",
    "hot dog",
    "baseball bat",
];

/// Class names removed for a ratio, cumulative across ratios.
pub fn removed_class_names(ratio: u32) -> Result<Vec<&'static str>> {
    let mut names: Vec<&'static str> = UNKNOWN_K5.to_vec();
    match ratio {
        5 => {}
        10 => names.extend(UNKNOWN_K10_EXTRA),
        20 => {
            names.extend(UNKNOWN_K10_EXTRA);
            names.extend(UNKNOWN_K20_EXTRA);
        }
        other => return Err(Error::InvalidRatio(other)),
    }
    Ok(names)
}

/// Which open-set variant to build on top of the COCO vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    ratio: u32,
    zero_shot: bool,
}

impl SplitSpec {
    pub fn new(ratio: u32, zero_shot: bool) -> Result<Self> {
        removed_class_names(ratio)?;
        Ok(Self { ratio, zero_shot })
    }

    /// The zero-shot setting, built on the 5% split.
    pub fn zero_shot() -> Self {
        Self {
            ratio: 5,
            zero_shot: true,
        }
    }

    pub fn ratio(&self) -> u32 {
        self.ratio
    }

    pub fn is_zero_shot(&self) -> bool {
        self.zero_shot
    }

    /// COCO registry with this variant's statuses assigned.
    pub fn registry(&self) -> CategoryRegistry {
        let base = coco::coco_registry();
        let mut split = make_split(&base, self.ratio).expect("ratio validated on construction");
        if self.zero_shot {
            split = make_zero_shot(&[], &split).expect("COCO registry holds every tail class");
        }
        split.registry
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitResult {
    pub registry: CategoryRegistry,
    /// Thing classes with unknown status.
    pub removed_thing_ids: BTreeSet<CategoryId>,
    /// Tail classes with unseen status (zero-shot only).
    pub unseen_ids: BTreeSet<CategoryId>,
    /// Training images dropped because they contain a tail-class instance.
    pub dropped_image_ids: BTreeSet<ImageId>,
    /// Ratio the split was built from, `None` for a custom class list.
    pub ratio: Option<u32>,
    pub zero_shot: bool,
    /// Whether crowd segments of tail classes count as instances when
    /// dropping zero-shot images.
    pub crowd_counts_as_instance: bool,
}

impl SplitResult {
    /// Category ids that are voided in training annotations.
    pub fn voided_ids(&self) -> BTreeSet<CategoryId> {
        self.removed_thing_ids
            .union(&self.unseen_ids)
            .copied()
            .collect()
    }
}

fn resolve_names(base: &CategoryRegistry, names: &[&str]) -> Result<BTreeSet<CategoryId>> {
    names
        .iter()
        .map(|&name| match base.by_name(name) {
            Some(c) if c.kind == Kind::Thing => Ok(c.id),
            Some(c) => Err(Error::Invalid(format!(
                "class {name} ({}) is stuff and cannot be removed",
                c.id
            ))),
            None => Err(Error::Invalid(format!("class {name} is not in the registry"))),
        })
        .collect()
}

fn with_unknown(base: &CategoryRegistry, ids: &BTreeSet<CategoryId>) -> Result<CategoryRegistry> {
    let statuses: BTreeMap<CategoryId, Status> =
        ids.iter().map(|&id| (id, Status::Unknown)).collect();
    base.with_statuses(&statuses)
}

/// Marks the fixed class list for ratio `ratio` as unknown.
pub fn make_split(base: &CategoryRegistry, ratio: u32) -> Result<SplitResult> {
    let names = removed_class_names(ratio)?;
    let removed = resolve_names(base, &names)?;
    Ok(SplitResult {
        registry: with_unknown(base, &removed)?,
        removed_thing_ids: removed,
        unseen_ids: BTreeSet::new(),
        dropped_image_ids: BTreeSet::new(),
        ratio: Some(ratio),
        zero_shot: false,
        crowd_counts_as_instance: true,
    })
}

/// Marks an arbitrary list of thing classes as unknown. Not one of the
/// standard benchmark splits.
pub fn make_custom_split(base: &CategoryRegistry, names: &[&str]) -> Result<SplitResult> {
    let removed = resolve_names(base, names)?;
    Ok(SplitResult {
        registry: with_unknown(base, &removed)?,
        removed_thing_ids: removed,
        unseen_ids: BTreeSet::new(),
        dropped_image_ids: BTreeSet::new(),
        ratio: None,
        zero_shot: false,
        crowd_counts_as_instance: true,
    })
}

/// Removes unknown and unseen segments from a training annotation, turning
/// their pixels into void.
pub fn apply_split(ann: &PanopticAnnotation, split: &SplitResult) -> Result<PanopticAnnotation> {
    let mut voided: HashSet<u32> = HashSet::new();
    let mut segments = Vec::with_capacity(ann.segments.len());
    for seg in &ann.segments {
        let status = split
            .registry
            .status(seg.category)
            .ok_or(Error::UnknownCategory(seg.category))?;
        if status == Status::Known {
            segments.push(seg.clone());
        } else {
            voided.insert(seg.id);
        }
    }

    let mut map = ann.map.clone();
    if !voided.is_empty() {
        for id in map.ids_mut() {
            if voided.contains(id) {
                *id = VOID;
            }
        }
    }
    Ok(PanopticAnnotation {
        image_id: ann.image_id,
        map,
        segments,
    })
}

/// Builds the zero-shot variant from a 5% split: tail classes become unseen
/// (taking precedence over unknown) and every image holding a tail-class
/// segment, crowd segments included, is dropped.
pub fn make_zero_shot(anns: &[PanopticAnnotation], split5: &SplitResult) -> Result<SplitResult> {
    let tail = resolve_names(&split5.registry, &TAIL_CLASSES)?;
    let mut statuses: BTreeMap<CategoryId, Status> = split5
        .removed_thing_ids
        .iter()
        .map(|&id| (id, Status::Unknown))
        .collect();
    for &id in &tail {
        statuses.insert(id, Status::Unseen);
    }
    let registry = split5.registry.with_statuses(&statuses)?;

    let dropped_image_ids = anns
        .iter()
        .filter(|ann| ann.segments.iter().any(|s| tail.contains(&s.category)))
        .map(|ann| ann.image_id)
        .collect();

    Ok(SplitResult {
        registry,
        removed_thing_ids: split5.removed_thing_ids.difference(&tail).copied().collect(),
        unseen_ids: tail,
        dropped_image_ids,
        ratio: split5.ratio,
        zero_shot: true,
        crowd_counts_as_instance: true,
    })
}
