//! Open-set inference rules and the assembly of verdicts into panoptic maps.
//!
//! A proposal is *rejected* by the known classes when its largest known-thing
//! probability, from a softmax that also includes background (and the
//! auxiliary class when present), falls below `tau_known`.
//!
//! | strategy                         | unknown when                         |
//! |----------------------------------|--------------------------------------|
//! | dual                             | rejected and `σ(obj) ≥ tau_obj`      |
//! | void-ignorance/-background/-suppression | rejected                      |
//! | void-train, aux-gate             | rejected and argmax is the aux class |
//!
//! Proposals that are not rejected are known (argmax over thing classes);
//! everything else is background.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softmax};
use crate::proposals::Proposal;
use crate::types::{
    BBox, CategoryId, CategoryRegistry, ImageId, PanopticAnnotation, SegmentMap, UNKNOWN_CATEGORY,
    VOID,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Dual,
    VoidIgnorance,
    VoidBackground,
    VoidSuppression,
    VoidTrain,
    AuxGate,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Dual,
        Strategy::VoidIgnorance,
        Strategy::VoidBackground,
        Strategy::VoidSuppression,
        Strategy::VoidTrain,
        Strategy::AuxGate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Dual => "dual",
            Strategy::VoidIgnorance => "void-ignorance",
            Strategy::VoidBackground => "void-background",
            Strategy::VoidSuppression => "void-suppression",
            Strategy::VoidTrain => "void-train",
            Strategy::AuxGate => "aux-gate",
        }
    }

    pub fn needs_aux(&self) -> bool {
        matches!(self, Strategy::VoidTrain | Strategy::AuxGate)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown strategy {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionConfig {
    pub strategy: Strategy,
    pub tau_known: f64,
    pub tau_obj: f64,
    /// Logit index of the auxiliary (void or exemplar) class.
    pub aux_index: Option<usize>,
    /// Category of each thing class, in logit order with background and the
    /// auxiliary class skipped. When empty the thing rank is used as the id.
    pub class_categories: Vec<CategoryId>,
}

impl DecisionConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            tau_known: 0.5,
            tau_obj: 0.5,
            aux_index: None,
            class_categories: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_known", self.tau_known), ("tau_obj", self.tau_obj)] {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::Invalid(format!("{name} = {tau} is not in (0, 1)")));
            }
        }
        if self.strategy.needs_aux() && self.aux_index.is_none() {
            return Err(Error::MissingAuxIndex(self.strategy.name()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum Outcome {
    Known { category_id: CategoryId },
    Unknown,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(flatten)]
    pub outcome: Outcome,
    /// Largest known-thing probability.
    pub known_conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obj_conf: Option<f64>,
}

fn decide_one(index: usize, p: &Proposal, cfg: &DecisionConfig) -> Result<Verdict> {
    let scores = p.scores.as_ref().ok_or(Error::MissingScore {
        index,
        what: "classification logits",
    })?;
    let logits = &scores.logits;
    if logits.len() < 2 {
        return Err(Error::Invalid(format!(
            "proposal {index} has {} logits; need at least one thing class and background",
            logits.len()
        )));
    }
    let bg = logits.len() - 1;
    let aux = if cfg.strategy.needs_aux() {
        let a = cfg.aux_index.ok_or(Error::MissingAuxIndex(cfg.strategy.name()))?;
        if a >= bg {
            return Err(Error::Invalid(format!(
                "aux index {a} must point at a non-background logit (< {bg})"
            )));
        }
        Some(a)
    } else {
        None
    };

    let probs = softmax(logits);
    let mut best: Option<(usize, f64)> = None;
    for (rank, (_, &p)) in probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != bg && Some(i) != aux)
        .enumerate()
    {
        if best.is_none_or(|(_, v)| p > v) {
            best = Some((rank, p));
        }
    }
    let (rank, known_conf) = best.ok_or_else(|| {
        Error::Invalid(format!("proposal {index} has no thing-class logits"))
    })?;

    let obj_conf = scores.objectness.map(sigmoid);
    let rejected = known_conf < cfg.tau_known;

    let outcome = if !rejected {
        let category_id = if cfg.class_categories.is_empty() {
            CategoryId(rank as u32)
        } else {
            *cfg.class_categories.get(rank).ok_or_else(|| {
                Error::Invalid(format!(
                    "thing class {rank} has no category mapping ({} given)",
                    cfg.class_categories.len()
                ))
            })?
        };
        Outcome::Known { category_id }
    } else {
        let unknown = match cfg.strategy {
            Strategy::Dual => {
                let conf = obj_conf.ok_or(Error::MissingScore {
                    index,
                    what: "an objectiveness logit",
                })?;
                conf >= cfg.tau_obj
            }
            Strategy::VoidIgnorance | Strategy::VoidBackground | Strategy::VoidSuppression => true,
            Strategy::VoidTrain | Strategy::AuxGate => {
                let a = aux.expect("checked above");
                let argmax = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                        if v > acc.1 {
                            (i, v)
                        } else {
                            acc
                        }
                    })
                    .0;
                argmax == a
            }
        };
        if unknown {
            Outcome::Unknown
        } else {
            Outcome::Background
        }
    };
    Ok(Verdict {
        outcome,
        known_conf,
        obj_conf,
    })
}

/// One verdict per proposal, in input order.
pub fn decide(props: &[Proposal], cfg: &DecisionConfig) -> Result<Vec<Verdict>> {
    cfg.validate()?;
    props
        .iter()
        .enumerate()
        .map(|(i, p)| decide_one(i, p, cfg))
        .collect()
}

/// Binary instance mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Invalid("mask length does not match its size".into()));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Filled rectangle, clipped to the image.
    pub fn from_box(width: u32, height: u32, b: BBox) -> Self {
        let mut bits = vec![false; width as usize * height as usize];
        for y in b.y.min(height)..b.y1().min(height) {
            let row = y as usize * width as usize;
            for x in b.x.min(width)..b.x1().min(width) {
                bits[row + x as usize] = true;
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PaintOptions {
    /// Drop an unknown verdict whose mask overlaps an already painted unknown
    /// mask with IoU above 0.5.
    pub suppress_unknown_overlap: bool,
}

/// Paints verdict masks into a panoptic annotation, highest `known_conf`
/// first. A pixel keeps the first segment painted on it; background verdicts
/// are not painted. Unknown verdicts use [`UNKNOWN_CATEGORY`].
pub fn decisions_to_panoptic(
    image_id: ImageId,
    (width, height): (u32, u32),
    verdicts: &[Verdict],
    masks: &[Mask],
    registry: &CategoryRegistry,
    opts: PaintOptions,
) -> Result<PanopticAnnotation> {
    if verdicts.len() != masks.len() {
        return Err(Error::Invalid(format!(
            "{} verdicts but {} masks",
            verdicts.len(),
            masks.len()
        )));
    }
    for m in masks {
        if m.dims() != (width, height) {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: m.dims(),
            });
        }
    }
    let mut order: Vec<usize> = (0..verdicts.len()).collect();
    order.sort_by(|&a, &b| verdicts[b].known_conf.total_cmp(&verdicts[a].known_conf).then(a.cmp(&b)));

    let mut map = SegmentMap::filled(width, height, VOID);
    let mut labels = BTreeMap::new();
    let mut painted_unknown: Vec<usize> = Vec::new();
    let mut next_id = 1u32;
    for i in order {
        let category = match verdicts[i].outcome {
            Outcome::Background => continue,
            Outcome::Unknown => {
                if opts.suppress_unknown_overlap
                    && painted_unknown.iter().any(|&j| masks[j].iou(&masks[i]) > 0.5)
                {
                    continue;
                }
                painted_unknown.push(i);
                UNKNOWN_CATEGORY
            }
            Outcome::Known { category_id } => {
                if !registry.contains(category_id) {
                    return Err(Error::UnknownCategory(category_id));
                }
                category_id
            }
        };
        let id = next_id;
        next_id += 1;
        for (px, &on) in map.ids_mut().iter_mut().zip(masks[i].bits()) {
            if on && *px == VOID {
                *px = id;
            }
        }
        labels.insert(id, (category, false));
    }
    Ok(PanopticAnnotation::from_map(image_id, map, &labels))
}
