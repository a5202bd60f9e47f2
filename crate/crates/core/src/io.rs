//! Reader and writer for panoptic datasets: one JSON metadata document plus
//! one lossless RGB PNG per image, with `id = R + 256 G + 65536 B`.
//!
//! Dataset directories produced by [`write_dataset`] use the layout
//!
//! ```text
//! <dir>/panoptic.json
//! <dir>/maps/<image_id:012>.png
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    validate_annotation, Category, CategoryId, CategoryRegistry, ImageId, Kind, PanopticAnnotation,
    SegmentId, SegmentInfo, SegmentMap, Status, UNKNOWN_CATEGORY,
};

pub const META_FILE: &str = "panoptic.json";
pub const MAPS_DIR: &str = "maps";

/// Largest id representable in a 24-bit RGB pixel.
pub const MAX_SEGMENT_ID: SegmentId = (1 << 24) - 1;

pub fn rgb_to_id(rgb: [u8; 3]) -> SegmentId {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 65536 * rgb[2] as u32
}

pub fn id_to_rgb(id: SegmentId) -> [u8; 3] {
    debug_assert!(id <= MAX_SEGMENT_ID);
    [id as u8, (id >> 8) as u8, (id >> 16) as u8]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryRecord {
    id: CategoryId,
    name: String,
    #[serde(with = "isthing")]
    isthing: Kind,
    #[serde(default)]
    status: Status,
}

mod isthing {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::types::Kind;

    pub fn serialize<S: Serializer>(k: &Kind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8((*k == Kind::Thing) as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Kind, D::Error> {
        Ok(if u8::deserialize(d)? != 0 {
            Kind::Thing
        } else {
            Kind::Stuff
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: ImageId,
    file_name: String,
    segments_info: Vec<SegmentInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaDoc {
    categories: Vec<CategoryRecord>,
    #[serde(default)]
    annotations: Vec<AnnotationRecord>,
}

pub fn map_file_name(image_id: ImageId) -> String {
    format!("{image_id:012}.png")
}

fn parse_meta(path: &Path) -> Result<MetaDoc> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::MalformedMeta {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn registry_from(records: &[CategoryRecord]) -> Result<CategoryRegistry> {
    let entries = records
        .iter()
        .map(|r| Category {
            id: r.id,
            name: r.name.clone(),
            kind: r.isthing,
            status: r.status,
        })
        .collect();
    CategoryRegistry::new(entries).map_err(|e| Error::MalformedMeta {
        path: "categories".into(),
        message: e.to_string(),
    })
}

/// Reads the `categories` section of a metadata document.
pub fn read_registry(meta_path: &Path) -> Result<CategoryRegistry> {
    registry_from(&parse_meta(meta_path)?.categories)
}

pub fn decode_map(path: &Path) -> Result<SegmentMap> {
    if !path.is_file() {
        return Err(Error::MissingMap(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (width, height) = rgb.dimensions();
    let ids = rgb.pixels().map(|p| rgb_to_id(p.0)).collect();
    SegmentMap::new(width, height, ids)
}

pub fn encode_map(map: &SegmentMap) -> Result<RgbImage> {
    let mut buf = Vec::with_capacity(map.ids().len() * 3);
    for &id in map.ids() {
        if id > MAX_SEGMENT_ID {
            return Err(Error::Invalid(format!(
                "segment id {id} does not fit in 24 bits"
            )));
        }
        buf.extend_from_slice(&id_to_rgb(id));
    }
    Ok(RgbImage::from_raw(map.width(), map.height(), buf).expect("buffer sized from map"))
}

fn load_annotation(
    index: usize,
    rec: &AnnotationRecord,
    registry: &CategoryRegistry,
    maps_dir: &Path,
) -> Result<PanopticAnnotation> {
    for (j, seg) in rec.segments_info.iter().enumerate() {
        if !registry.contains(seg.category) && seg.category != UNKNOWN_CATEGORY {
            return Err(Error::MalformedMeta {
                path: format!("annotations[{index}].segments_info[{j}].category_id"),
                message: format!("category {} is not declared", seg.category),
            });
        }
    }
    let map = decode_map(&maps_dir.join(&rec.file_name))?;
    let ann = PanopticAnnotation {
        image_id: rec.image_id,
        map,
        segments: rec.segments_info.clone(),
    };
    let violations = validate_annotation(&ann);
    if !violations.is_empty() {
        return Err(Error::Validation {
            image_id: ann.image_id,
            violations,
        });
    }
    Ok(ann)
}

/// Reads and validates a dataset. Maps are decoded in parallel; the result
/// follows metadata order and the first failing record (in that order) is
/// reported.
pub fn read_dataset(
    meta_path: &Path,
    maps_dir: &Path,
) -> Result<(CategoryRegistry, Vec<PanopticAnnotation>)> {
    let doc = parse_meta(meta_path)?;
    let registry = registry_from(&doc.categories)?;
    let mut seen = BTreeSet::new();
    for (i, rec) in doc.annotations.iter().enumerate() {
        if !seen.insert(rec.image_id) {
            return Err(Error::MalformedMeta {
                path: format!("annotations[{i}].image_id"),
                message: format!("duplicate image id {}", rec.image_id),
            });
        }
    }
    let results: Vec<Result<PanopticAnnotation>> = doc
        .annotations
        .par_iter()
        .enumerate()
        .map(|(i, rec)| load_annotation(i, rec, &registry, maps_dir))
        .collect();
    let anns = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((registry, anns))
}

/// Reads a dataset directory in the [`write_dataset`] layout.
pub fn read_dataset_dir(dir: &Path) -> Result<(CategoryRegistry, Vec<PanopticAnnotation>)> {
    read_dataset(&dir.join(META_FILE), &dir.join(MAPS_DIR))
}

fn registry_records(registry: &CategoryRegistry) -> Vec<CategoryRecord> {
    registry
        .entries()
        .iter()
        .map(|c| CategoryRecord {
            id: c.id,
            name: c.name.clone(),
            isthing: c.kind,
            status: c.status,
        })
        .collect()
}

/// Writes `registry` alone as a metadata document with no annotations.
pub fn write_registry(registry: &CategoryRegistry, path: &Path) -> Result<()> {
    let doc = MetaDoc {
        categories: registry_records(registry),
        annotations: Vec::new(),
    };
    write_json(path, &doc)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    use std::io::Write;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes a dataset directory. Output is byte-identical across runs for the
/// same input.
pub fn write_dataset(
    registry: &CategoryRegistry,
    anns: &[PanopticAnnotation],
    out_dir: &Path,
) -> Result<PathBuf> {
    let mut seen = BTreeSet::new();
    for ann in anns {
        if !seen.insert(ann.image_id) {
            return Err(Error::Invalid(format!(
                "duplicate image id {}",
                ann.image_id
            )));
        }
        let violations = validate_annotation(ann);
        if !violations.is_empty() {
            return Err(Error::Validation {
                image_id: ann.image_id,
                violations,
            });
        }
        if let Some(seg) = anns_unregistered(ann, registry) {
            return Err(Error::UnknownCategory(seg));
        }
    }

    let maps_dir = out_dir.join(MAPS_DIR);
    fs::create_dir_all(&maps_dir)?;

    anns.par_iter()
        .map(|ann| -> Result<()> {
            let img = encode_map(&ann.map)?;
            let path = maps_dir.join(map_file_name(ann.image_id));
            img.save_with_format(&path, ImageFormat::Png)
                .map_err(|e| Error::Io(std::io::Error::other(e)))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<()>>()?;

    let doc = MetaDoc {
        categories: registry_records(registry),
        annotations: anns
            .iter()
            .map(|ann| AnnotationRecord {
                image_id: ann.image_id,
                file_name: map_file_name(ann.image_id),
                segments_info: ann.segments.clone(),
            })
            .collect(),
    };
    let meta_path = out_dir.join(META_FILE);
    write_json(&meta_path, &doc)?;
    Ok(meta_path)
}

fn anns_unregistered(ann: &PanopticAnnotation, registry: &CategoryRegistry) -> Option<CategoryId> {
    ann.segments
        .iter()
        .map(|s| s.category)
        .find(|&c| !registry.contains(c) && c != UNKNOWN_CATEGORY)
}
