//! Core domain types: segment maps, annotations and the category vocabulary.
//!
//! Pixel id 0 is void (unlabeled) and never appears as a [`SegmentInfo`].
//! Segment ids are scoped to one image.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment id inside one image; 0 is void.
pub type SegmentId = u32;

/// Image identifier as it appears in the metadata document.
pub type ImageId = u64;

/// Pixel id of unlabeled area.
pub const VOID: SegmentId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Category carried by every predicted "unknown" segment.
pub const UNKNOWN_CATEGORY: CategoryId = CategoryId(1000);

/// Evaluation bucket for ground-truth segments of unseen classes.
pub const UNSEEN_CATEGORY: CategoryId = CategoryId(1001);

/// Axis-aligned pixel box `(x, y, w, h)`. Serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn x1(&self) -> u32 {
        self.x + self.w
    }

    pub fn y1(&self) -> u32 {
        self.y + self.h
    }

    pub fn intersection(&self, other: &BBox) -> u64 {
        let w = self.x1().min(other.x1()).saturating_sub(self.x.max(other.x));
        let h = self.y1().min(other.y1()).saturating_sub(self.y.max(other.y));
        w as u64 * h as u64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x1() && y >= self.y && y < self.y1()
    }
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Running tight bounding box over pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Extent {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
    pub count: u64,
}

impl Extent {
    pub fn new(x: u32, y: u32) -> Self {
        Self {
            min_x: x,
            min_y: y,
            max_x: x,
            max_y: y,
            count: 1,
        }
    }

    pub fn add(&mut self, x: u32, y: u32) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
        self.count += 1;
    }

    pub fn from_run(x0: u32, x1: u32, y: u32) -> Self {
        Self {
            min_x: x0,
            min_y: y,
            max_x: x1,
            max_y: y,
            count: u64::from(x1 - x0 + 1),
        }
    }

    /// Adds the horizontal run `x0..=x1` on row `y`.
    pub fn add_run(&mut self, x0: u32, x1: u32, y: u32) {
        self.min_x = self.min_x.min(x0);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x1);
        self.max_y = self.max_y.max(y);
        self.count += u64::from(x1 - x0 + 1);
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.min_x,
            self.min_y,
            self.max_x - self.min_x + 1,
            self.max_y - self.min_y + 1,
        )
    }
}

/// Row-major grid of segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    width: u32,
    height: u32,
    ids: Vec<SegmentId>,
}

impl SegmentMap {
    pub fn new(width: u32, height: u32, ids: Vec<SegmentId>) -> Result<Self> {
        if ids.len() as u64 != width as u64 * height as u64 {
            return Err(Error::Invalid(format!(
                "segment map of {width}x{height} needs {} ids, got {}",
                width as u64 * height as u64,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    /// A map where every pixel carries `id`.
    pub fn filled(width: u32, height: u32, id: SegmentId) -> Self {
        Self {
            width,
            height,
            ids: vec![id; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn ids(&self) -> &[SegmentId] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [SegmentId] {
        &mut self.ids
    }

    pub fn get(&self, x: u32, y: u32) -> SegmentId {
        self.ids[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, id: SegmentId) {
        self.ids[y as usize * self.width as usize + x as usize] = id;
    }

    /// Area and tight bbox of every nonzero id present in the map.
    pub fn segment_extents(&self) -> BTreeMap<SegmentId, (u64, BBox)> {
        let mut extents: HashMap<SegmentId, Extent> = HashMap::new();
        if self.width > 0 {
            for (row, line) in self.ids.chunks_exact(self.width as usize).enumerate() {
                let y = row as u32;
                let mut start = 0usize;
                while start < line.len() {
                    let id = line[start];
                    let mut end = start + 1;
                    while end < line.len() && line[end] == id {
                        end += 1;
                    }
                    if id != VOID {
                        let (x0, x1) = (start as u32, end as u32 - 1);
                        extents
                            .entry(id)
                            .and_modify(|e| e.add_run(x0, x1, y))
                            .or_insert_with(|| Extent::from_run(x0, x1, y));
                    }
                    start = end;
                }
            }
        }
        extents
            .into_iter()
            .map(|(id, e)| (id, (e.count, e.bbox())))
            .collect()
    }

    pub fn void_count(&self) -> u64 {
        self.ids.iter().filter(|&&id| id == VOID).count() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: SegmentId,
    #[serde(rename = "category_id")]
    pub category: CategoryId,
    pub area: u64,
    pub bbox: BBox,
    #[serde(rename = "iscrowd", with = "crowd_flag")]
    pub crowd: bool,
}

/// COCO stores `iscrowd` as 0/1.
mod crowd_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        Ok(u8::deserialize(d)? != 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticAnnotation {
    pub image_id: ImageId,
    pub map: SegmentMap,
    pub segments: Vec<SegmentInfo>,
}

impl PanopticAnnotation {
    /// Builds an annotation whose area and bbox fields are measured from `map`.
    ///
    /// `labels` gives `(category, crowd)` for each segment id; ids present in
    /// `labels` but absent from the map are dropped.
    pub fn from_map(
        image_id: ImageId,
        map: SegmentMap,
        labels: &BTreeMap<SegmentId, (CategoryId, bool)>,
    ) -> Self {
        let extents = map.segment_extents();
        let segments = labels
            .iter()
            .filter_map(|(&id, &(category, crowd))| {
                extents.get(&id).map(|&(area, bbox)| SegmentInfo {
                    id,
                    category,
                    area,
                    bbox,
                    crowd,
                })
            })
            .collect();
        Self {
            image_id,
            map,
            segments,
        }
    }

    /// An annotation with no segments: every pixel is void.
    pub fn empty(image_id: ImageId, width: u32, height: u32) -> Self {
        Self {
            image_id,
            map: SegmentMap::filled(width, height, VOID),
            segments: Vec::new(),
        }
    }

    pub fn segment(&self, id: SegmentId) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    AreaMismatch {
        id: SegmentId,
        declared: u64,
        actual: u64,
    },
    BBoxMismatch {
        id: SegmentId,
        declared: BBox,
        actual: BBox,
    },
    OrphanId(SegmentId),
    DuplicateId(SegmentId),
    ZeroArea(SegmentId),
    VoidSegment,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::AreaMismatch {
                id,
                declared,
                actual,
            } => write!(
                f,
                "segment {id}: declared area {declared}, map holds {actual} pixels"
            ),
            Violation::BBoxMismatch {
                id,
                declared,
                actual,
            } => write!(
                f,
                "segment {id}: declared bbox {:?}, tight bbox is {:?}",
                <[u32; 4]>::from(*declared),
                <[u32; 4]>::from(*actual)
            ),
            Violation::OrphanId(id) => write!(f, "map id {id} has no segment record"),
            Violation::DuplicateId(id) => write!(f, "segment {id} is listed more than once"),
            Violation::ZeroArea(id) => write!(f, "segment {id} has zero area"),
            Violation::VoidSegment => write!(f, "a segment record uses the void id 0"),
        }
    }
}

/// Checks every segment record against the pixels of the map.
pub fn validate_annotation(ann: &PanopticAnnotation) -> Vec<Violation> {
    let extents = ann.map.segment_extents();
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();

    for seg in &ann.segments {
        if seg.id == VOID {
            violations.push(Violation::VoidSegment);
            continue;
        }
        if !seen.insert(seg.id) {
            violations.push(Violation::DuplicateId(seg.id));
            continue;
        }
        match extents.get(&seg.id) {
            None => {
                violations.push(Violation::ZeroArea(seg.id));
            }
            Some(&(area, bbox)) => {
                if seg.area != area {
                    violations.push(Violation::AreaMismatch {
                        id: seg.id,
                        declared: seg.area,
                        actual: area,
                    });
                }
                if seg.bbox != bbox {
                    violations.push(Violation::BBoxMismatch {
                        id: seg.id,
                        declared: seg.bbox,
                        actual: bbox,
                    });
                }
            }
        }
    }

    for &id in extents.keys() {
        if !seen.contains(&id) {
            violations.push(Violation::OrphanId(id));
        }
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    #[default]
    Known,
    Unknown,
    Unseen,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Known => "known",
            Status::Unknown => "unknown",
            Status::Unseen => "unseen",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    pub kind: Kind,
    pub status: Status,
}

impl Category {
    pub fn is_thing(&self) -> bool {
        self.kind == Kind::Thing
    }
}

/// Category ids with thing/stuff kind and known/unknown/unseen status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRegistry {
    entries: Vec<Category>,
    index: HashMap<CategoryId, usize>,
}

impl CategoryRegistry {
    pub fn new(entries: Vec<Category>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, c) in entries.iter().enumerate() {
            if c.id == UNKNOWN_CATEGORY || c.id == UNSEEN_CATEGORY {
                return Err(Error::Registry(format!(
                    "category id {} is reserved",
                    c.id
                )));
            }
            if index.insert(c.id, i).is_some() {
                return Err(Error::Registry(format!("duplicate category id {}", c.id)));
            }
            if c.kind == Kind::Stuff && c.status != Status::Known {
                return Err(Error::Registry(format!(
                    "stuff category {} ({}) must be known",
                    c.id, c.name
                )));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }

    pub fn get(&self, id: CategoryId) -> Option<&Category> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn by_name(&self, name: &str) -> Option<&Category> {
        self.entries.iter().find(|c| c.name == name)
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn status(&self, id: CategoryId) -> Option<Status> {
        self.get(id).map(|c| c.status)
    }

    pub fn things(&self) -> impl Iterator<Item = &Category> {
        self.entries.iter().filter(|c| c.kind == Kind::Thing)
    }

    pub fn stuff(&self) -> impl Iterator<Item = &Category> {
        self.entries.iter().filter(|c| c.kind == Kind::Stuff)
    }

    pub fn with_status(&self, status: Status) -> impl Iterator<Item = &Category> {
        self.entries.iter().filter(move |c| c.status == status)
    }

    /// Known thing categories in registry order; position is the class index
    /// used by the classification head.
    pub fn known_things(&self) -> Vec<CategoryId> {
        self.things()
            .filter(|c| c.status == Status::Known)
            .map(|c| c.id)
            .collect()
    }

    /// Returns a copy with the given statuses applied. Stuff categories
    /// cannot be assigned a non-known status.
    pub fn with_statuses(&self, statuses: &BTreeMap<CategoryId, Status>) -> Result<Self> {
        let mut entries = self.entries.clone();
        for (&id, &status) in statuses {
            let &i = self.index.get(&id).ok_or(Error::UnknownCategory(id))?;
            entries[i].status = status;
        }
        Self::new(entries)
    }
}
