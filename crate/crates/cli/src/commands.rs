//! Subcommand implementations. Each returns `Ok(true)` on success,
//! `Ok(false)` when a check fails and `Err` on usage or data errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use opseg_core::coco::coco_registry;
use opseg_core::decision::{decide as run_decide, decisions_to_panoptic, DecisionConfig, Mask, PaintOptions, Verdict};
use opseg_core::gradcheck::{run_suite, SuiteOptions};
use opseg_core::io::{read_dataset_dir, read_registry, write_dataset, write_json};
use opseg_core::pq::{consistency_check, evaluate, f1, format_table, report, Group, MatchOptions};
use opseg_core::proposals::{
    label_proposals, pseudo_filter as run_pseudo_filter, void_components as run_void_components,
    Connectivity, LabelConfig, Proposal, Role,
};
use opseg_core::splits::{apply_split, make_custom_split, make_split, make_zero_shot, SplitResult};
use opseg_core::synth::{Scene, SceneConfig};
use opseg_core::{BBox, CategoryId, CategoryRegistry, ImageId, PanopticAnnotation, Status};

use crate::{
    ConsistencyArgs, DecideArgs, EvalArgs, GroupArg, LabelArgs, LossCheckArgs, PseudoArgs,
    SplitArgs, SynthArgs, VoidArgs,
};

/// Name of the manifest written next to a split dataset.
const MANIFEST_FILE: &str = "split.json";

fn read_proposals(path: &Path) -> Result<Vec<Proposal>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .with_context(|| format!("parsing proposals in {}", path.display()))
}

fn write_out<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value).with_context(|| format!("writing {}", path.display()))
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let jobs = jobs.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building the worker pool")
}

fn groups_for(args: &[GroupArg]) -> Vec<Group> {
    if args.is_empty() || args.contains(&GroupArg::All) {
        return Group::ALL.to_vec();
    }
    let mut out = Vec::new();
    for g in args {
        match g {
            GroupArg::Known => out.extend([Group::Known, Group::KnownThing, Group::KnownStuff]),
            GroupArg::Unknown => out.push(Group::Unknown),
            GroupArg::Unseen => out.push(Group::Unseen),
            GroupArg::All => {}
        }
    }
    out
}

#[derive(Serialize)]
struct EvalReport<'a> {
    options: MatchOptions,
    images: usize,
    #[serde(flatten)]
    report: &'a opseg_core::pq::MetricReport,
}

pub fn eval(args: EvalArgs) -> Result<bool> {
    let pool = thread_pool(args.jobs)?;
    let opts = MatchOptions {
        strict: args.strict,
        open_set: !args.closed_set,
    };
    let (registry, gt, stats) = pool.install(|| -> Result<_> {
        let (mut registry, gt) = read_dataset_dir(&args.gt_dir)
            .with_context(|| format!("reading ground truth {}", args.gt_dir.display()))?;
        if let Some(path) = &args.registry {
            registry = read_registry(path)
                .with_context(|| format!("reading registry {}", path.display()))?;
        }
        let (_, pred) = read_dataset_dir(&args.pred_dir)
            .with_context(|| format!("reading predictions {}", args.pred_dir.display()))?;
        let stats = evaluate(&gt, &pred, &registry, opts)?;
        Ok((registry, gt, stats))
    })?;
    let rep = report(&stats, &registry);
    let doc = EvalReport {
        options: opts,
        images: gt.len(),
        report: &rep,
    };
    if let Some(path) = &args.report {
        write_out(path, &doc)?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", format_table(&rep, &groups_for(&args.group), args.per_category));
    }
    Ok(true)
}

#[derive(Serialize)]
struct ClassEntry {
    id: CategoryId,
    name: String,
}

#[derive(Serialize)]
struct Manifest {
    ratio: Option<u32>,
    zero_shot: bool,
    standard_split: bool,
    eval_set: bool,
    removed_classes: Vec<ClassEntry>,
    unseen_classes: Vec<ClassEntry>,
    crowd_counts_as_instance: bool,
    input_images: usize,
    output_images: usize,
    dropped_image_count: usize,
    dropped_image_ids: Vec<ImageId>,
}

fn class_entries(ids: &BTreeSet<CategoryId>, registry: &CategoryRegistry) -> Vec<ClassEntry> {
    ids.iter()
        .map(|&id| ClassEntry {
            id,
            name: registry.get(id).map(|c| c.name.clone()).unwrap_or_default(),
        })
        .collect()
}

fn build_split(args: &SplitArgs, base: &CategoryRegistry, anns: &[PanopticAnnotation]) -> Result<SplitResult> {
    Ok(if let Some(ratio) = args.ratio {
        make_split(base, ratio)?
    } else if args.zero_shot {
        make_zero_shot(anns, &make_split(base, 5)?)?
    } else {
        let names = args.classes.as_deref().unwrap_or_default();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        make_custom_split(base, &names)?
    })
}

pub fn split(args: SplitArgs) -> Result<bool> {
    let (base, anns) = read_dataset_dir(&args.in_dir)
        .with_context(|| format!("reading {}", args.in_dir.display()))?;
    let split = build_split(&args, &base, &anns)?;

    let out: Vec<PanopticAnnotation> = if args.eval_set {
        anns.clone()
    } else {
        anns.iter()
            .filter(|a| !split.dropped_image_ids.contains(&a.image_id))
            .map(|a| apply_split(a, &split))
            .collect::<opseg_core::Result<_>>()?
    };
    let dropped: Vec<ImageId> = if args.eval_set {
        Vec::new()
    } else {
        split.dropped_image_ids.iter().copied().collect()
    };

    fs::create_dir_all(&args.out_dir)?;
    write_dataset(&split.registry, &out, &args.out_dir)?;
    let manifest = Manifest {
        ratio: split.ratio,
        zero_shot: split.zero_shot,
        standard_split: args.classes.is_none(),
        eval_set: args.eval_set,
        removed_classes: class_entries(&split.removed_thing_ids, &split.registry),
        unseen_classes: class_entries(&split.unseen_ids, &split.registry),
        crowd_counts_as_instance: split.crowd_counts_as_instance,
        input_images: anns.len(),
        output_images: out.len(),
        dropped_image_count: dropped.len(),
        dropped_image_ids: dropped,
    };
    write_out(&args.out_dir.join(MANIFEST_FILE), &manifest)?;
    println!(
        "removed {} classes, {} unseen, dropped {} of {} images",
        manifest.removed_classes.len(),
        manifest.unseen_classes.len(),
        manifest.dropped_image_count,
        manifest.input_images
    );
    Ok(true)
}

fn by_image(anns: &[PanopticAnnotation]) -> BTreeMap<ImageId, &PanopticAnnotation> {
    anns.iter().map(|a| (a.image_id, a)).collect()
}

/// Groups proposals by image id, keeping the input position of each.
fn group_proposals(props: &[Proposal]) -> BTreeMap<ImageId, Vec<usize>> {
    let mut out: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    for (i, p) in props.iter().enumerate() {
        out.entry(p.image_id).or_default().push(i);
    }
    out
}

pub fn label(args: LabelArgs) -> Result<bool> {
    let (registry, gt) = read_dataset_dir(&args.gt_dir)?;
    let props = read_proposals(&args.proposals)?;
    let cfg = LabelConfig {
        known_iou: args.known_iou,
        void_fraction: args.void_fraction,
    };
    let images = by_image(&gt);
    let mut labeled: Vec<Option<Proposal>> = vec![None; props.len()];
    for (image_id, idx) in group_proposals(&props) {
        let ann = images
            .get(&image_id)
            .with_context(|| format!("proposal for image {image_id}, which is not in the ground truth"))?;
        let batch: Vec<Proposal> = idx.iter().map(|&i| props[i].clone()).collect();
        for (i, p) in idx.into_iter().zip(label_proposals(&batch, ann, &registry, cfg)?) {
            labeled[i] = Some(p);
        }
    }
    let labeled: Vec<Proposal> = labeled.into_iter().flatten().collect();
    let mut counts = [0usize; 3];
    for p in &labeled {
        match p.role {
            Some(Role::Known { .. }) => counts[0] += 1,
            Some(Role::Void) => counts[1] += 1,
            _ => counts[2] += 1,
        }
    }
    write_out(&args.out, &labeled)?;
    println!(
        "{} proposals: {} known, {} void, {} background",
        labeled.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(true)
}

pub fn void_components(args: VoidArgs) -> Result<bool> {
    let (_, gt) = read_dataset_dir(&args.gt_dir)?;
    let conn = if args.eight {
        Connectivity::Eight
    } else {
        Connectivity::Four
    };
    let props: Vec<Proposal> = gt
        .iter()
        .flat_map(|ann| run_void_components(ann, conn))
        .collect();
    write_out(&args.out, &props)?;
    println!("{} void regions in {} images", props.len(), gt.len());
    Ok(true)
}

pub fn pseudo_filter(args: PseudoArgs) -> Result<bool> {
    let props = read_proposals(&args.proposals)?;
    let candidates: Vec<Proposal> = if args.void_only {
        props
            .into_iter()
            .filter(|p| p.role == Some(Role::Void))
            .collect()
    } else {
        props
    };
    let (kept, dropped) = run_pseudo_filter(&candidates, args.delta)?;
    write_out(&args.out, &kept)?;
    if let Some(path) = &args.dropped {
        write_out(path, &dropped)?;
    }
    println!("kept {} of {} proposals", kept.len(), candidates.len());
    Ok(true)
}

#[derive(Serialize)]
struct VerdictRecord {
    image_id: ImageId,
    #[serde(rename = "box")]
    bbox: BBox,
    #[serde(flatten)]
    verdict: Verdict,
}

pub fn decide(args: DecideArgs) -> Result<bool> {
    let props = read_proposals(&args.proposals)?;
    let gt = match &args.gt {
        Some(dir) => Some(read_dataset_dir(dir)?),
        None => None,
    };
    let class_categories = match (&args.class_map, &gt) {
        (Some(ids), _) => ids.iter().map(|&id| CategoryId(id)).collect(),
        (None, Some((registry, _))) => registry.known_things(),
        (None, None) => Vec::new(),
    };
    let cfg = DecisionConfig {
        strategy: args.strategy,
        tau_known: args.tau_known,
        tau_obj: args.tau_obj,
        aux_index: args.aux_index,
        class_categories,
    };
    let verdicts = run_decide(&props, &cfg)?;
    let records: Vec<VerdictRecord> = props
        .iter()
        .zip(&verdicts)
        .map(|(p, &verdict)| VerdictRecord {
            image_id: p.image_id,
            bbox: p.bbox,
            verdict,
        })
        .collect();
    write_out(&args.out, &records)?;

    let mut tally = [0usize; 3];
    for v in &verdicts {
        tally[match v.outcome {
            opseg_core::decision::Outcome::Known { .. } => 0,
            opseg_core::decision::Outcome::Unknown => 1,
            opseg_core::decision::Outcome::Background => 2,
        }] += 1;
    }
    println!(
        "{} proposals: {} known, {} unknown, {} background",
        verdicts.len(),
        tally[0],
        tally[1],
        tally[2]
    );

    if let (Some((registry, gt)), Some(out_dir)) = (&gt, &args.panoptic_out) {
        let groups = group_proposals(&props);
        let images = by_image(gt);
        if let Some(missing) = groups.keys().find(|id| !images.contains_key(id)) {
            bail!("proposal for image {missing}, which is not in the ground truth");
        }
        let opts = PaintOptions {
            suppress_unknown_overlap: args.suppress_unknown_overlap,
        };
        let mut out = Vec::with_capacity(gt.len());
        for ann in gt {
            let (w, h) = ann.map.dims();
            let idx = groups.get(&ann.image_id).cloned().unwrap_or_default();
            let vs: Vec<Verdict> = idx.iter().map(|&i| verdicts[i]).collect();
            let masks: Vec<Mask> = idx
                .iter()
                .map(|&i| {
                    let b = props[i].bbox;
                    ensure!(
                        b.x1() <= w && b.y1() <= h,
                        "proposal {i} box lies outside image {}",
                        ann.image_id
                    );
                    Ok(Mask::from_box(w, h, b))
                })
                .collect::<Result<_>>()?;
            out.push(decisions_to_panoptic(ann.image_id, (w, h), &vs, &masks, registry, opts)?);
        }
        fs::create_dir_all(out_dir)?;
        write_dataset(registry, &out, out_dir)?;
    }
    Ok(true)
}

pub fn loss_check(args: LossCheckArgs) -> Result<bool> {
    let rep = run_suite(&SuiteOptions {
        seed: args.seed,
        dim: args.dim,
        batch: args.batch,
        instances: args.instances,
        zero_weights: args.zero_weights,
    })?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rep)?);
    } else {
        println!(
            "seed {} dim {} batch {} instances {}{}",
            args.seed,
            args.dim,
            args.batch,
            args.instances,
            if args.zero_weights { " (zero weights)" } else { "" }
        );
        println!("{:<22} {:>12} {:>14}  result", "loss", "value", "max rel err");
        for c in &rep.checks {
            println!(
                "{:<22} {:>12.9} {:>14.3e}  {}",
                c.loss.label(),
                c.value,
                c.max_relative_error,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(rep.passed())
}

#[derive(Debug, Deserialize)]
struct TableRow {
    label: String,
    pq: f64,
    sq: f64,
    rq: f64,
    recall: f64,
    precision: f64,
}

pub fn consistency(args: ConsistencyArgs) -> Result<bool> {
    let mut reader = csv::Reader::from_path(&args.table)
        .with_context(|| format!("opening {}", args.table.display()))?;
    let rows: Vec<TableRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", args.table.display()))?;
    ensure!(!rows.is_empty(), "{} holds no rows", args.table.display());
    let devs = consistency_check(
        &rows
            .iter()
            .map(|r| (r.pq, r.sq, r.rq, r.recall, r.precision))
            .collect::<Vec<_>>(),
    );
    println!(
        "{:<28} {:>6} {:>10} {:>8} {:>10} {:>8}  result",
        "row", "PQ", "SQ*RQ/100", "dev", "F1(R,P)", "dev"
    );
    let mut all_ok = true;
    for (r, d) in rows.iter().zip(&devs) {
        let ok = d.pq_vs_sq_rq < args.pq_tol && d.rq_vs_f1 < args.rq_tol;
        all_ok &= ok;
        println!(
            "{:<28} {:>6.1} {:>10.2} {:>8.3} {:>10.2} {:>8.3}  {}",
            r.label,
            r.pq,
            r.sq * r.rq / 100.0,
            d.pq_vs_sq_rq,
            f1(r.recall, r.precision),
            d.rq_vs_f1,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let worst = |f: fn(&opseg_core::pq::Deviation) -> f64| devs.iter().map(f).fold(0.0, f64::max);
    println!(
        "max deviation: PQ {:.3} (tolerance {}), RQ {:.3} (tolerance {})",
        worst(|d| d.pq_vs_sq_rq),
        args.pq_tol,
        worst(|d| d.rq_vs_f1),
        args.rq_tol
    );
    Ok(all_ok)
}

pub fn synth(args: SynthArgs) -> Result<bool> {
    ensure!(args.width > 0 && args.height > 0, "image size must be positive");
    let registry = coco_registry();
    let cfg = SceneConfig {
        width: args.width,
        height: args.height,
        ..SceneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for image_id in 0..args.images {
        let scene = Scene::random(&mut rng, &cfg, &registry);
        gt.push(scene.render(image_id));
        if args.pred.is_some() {
            pred.push(scene.perturb(&mut rng, args.jitter, &registry).render(image_id));
        }
    }
    write_dataset(&registry, &gt, &args.out_dir)?;
    if let Some(dir) = &args.pred {
        write_dataset(&registry, &pred, dir)?;
    }
    let known = registry.with_status(Status::Known).count();
    println!("wrote {} images over {} categories", gt.len(), known);
    Ok(true)
}
