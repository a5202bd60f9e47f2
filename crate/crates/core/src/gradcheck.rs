//! Central finite-difference verification of the head-loss gradients.
//!
//! Random instances come from `ChaCha8Rng::seed_from_u64(seed)`: weights and
//! features are uniform in `[-2, 2]` and `[-1, 1]`, targets are drawn so every
//! batch holds at least one thing, one background and one void proposal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::{
    cls_loss, objectiveness_loss, pseudo_obj_loss, void_suppression_loss, Batch, HeadParams,
    Matrix, Target,
};
use crate::math::{dot, sigmoid};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradient checks fail above this relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Minimum distance between any void confidence and the pseudo-label gate.
pub const GATE_MARGIN: f64 = 1e-3;
/// Gate used for pseudo-label checks.
pub const CHECK_DELTA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Classification,
    VoidSuppression,
    Objectiveness,
    PseudoObjectiveness,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Classification,
        LossKind::VoidSuppression,
        LossKind::Objectiveness,
        LossKind::PseudoObjectiveness,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Classification => "classification",
            LossKind::VoidSuppression => "void-suppression",
            LossKind::Objectiveness => "objectiveness",
            LossKind::PseudoObjectiveness => "pseudo-objectiveness",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub params: HeadParams,
    pub batch: Batch,
    pub delta: f64,
}

/// `max |a - n| / max(max |a|, max |n|)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

fn with_class_weights(params: &HeadParams, w: &[f64]) -> HeadParams {
    let mut p = params.clone();
    p.class_weights.as_mut_slice().copy_from_slice(w);
    p
}

fn with_obj_weights(params: &HeadParams, theta: &[f64]) -> HeadParams {
    let mut p = params.clone();
    p.obj_weights.copy_from_slice(theta);
    p
}

/// Relative error between the analytic and numeric gradient of one loss.
pub fn check(kind: LossKind, inst: &Instance, h: f64) -> Result<f64> {
    let (p, b) = (&inst.params, &inst.batch);
    match kind {
        LossKind::Classification | LossKind::VoidSuppression => {
            let loss = |params: &HeadParams| match kind {
                LossKind::Classification => cls_loss(params, b),
                _ => void_suppression_loss(params, b),
            };
            let analytic = loss(p)?.grad;
            let numeric = numeric_gradient(
                |w| Ok(loss(&with_class_weights(p, w))?.loss),
                p.class_weights.as_slice(),
                h,
            )?;
            Ok(relative_error(analytic.as_slice(), &numeric))
        }
        LossKind::Objectiveness => {
            let analytic = objectiveness_loss(p, b)?.grad;
            let numeric = numeric_gradient(
                |t| Ok(objectiveness_loss(&with_obj_weights(p, t), b)?.loss),
                &p.obj_weights,
                h,
            )?;
            Ok(relative_error(&analytic, &numeric))
        }
        LossKind::PseudoObjectiveness => {
            let base = pseudo_obj_loss(p, b, inst.delta)?;
            let numeric = numeric_gradient(
                |t| {
                    let l = pseudo_obj_loss(&with_obj_weights(p, t), b, inst.delta)?;
                    if l.kept != base.kept {
                        return Err(Error::Invalid(
                            "finite-difference probe crossed the pseudo-label gate".into(),
                        ));
                    }
                    Ok(l.loss)
                },
                &p.obj_weights,
                h,
            )?;
            Ok(relative_error(&base.grad, &numeric))
        }
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, range: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-range..=range)).collect()
}

fn gate_margin_ok(inst: &Instance) -> bool {
    inst.batch
        .features
        .iter()
        .zip(&inst.batch.targets)
        .filter(|(_, t)| **t == Target::Void)
        .all(|(f, _)| (sigmoid(dot(&inst.params.obj_weights, f)) - inst.delta).abs() > GATE_MARGIN)
}

/// Draws one instance with `dim` features, `batch` proposals (at least 3)
/// and `n_thing` known classes. The objectiveness weights are redrawn until
/// every void proposal clears the gate margin.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    dim: usize,
    batch: usize,
    n_thing: usize,
) -> Result<Instance> {
    if dim == 0 || n_thing == 0 || batch < 3 {
        return Err(Error::Invalid(
            "need dim > 0, at least one class and a batch of 3 or more".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..=n_thing).map(|_| uniform_vec(rng, dim, 2.0)).collect();
    let class_weights = Matrix::from_rows(rows)?;
    let mut targets = vec![Target::Thing(rng.gen_range(0..n_thing)), Target::Background, Target::Void];
    for _ in 3..batch {
        targets.push(match rng.gen_range(0..3) {
            0 => Target::Thing(rng.gen_range(0..n_thing)),
            1 => Target::Background,
            _ => Target::Void,
        });
    }
    targets.shuffle(rng);
    let features = (0..batch).map(|_| uniform_vec(rng, dim, 1.0)).collect();
    let batch = Batch::new(features, targets)?;

    for _ in 0..1000 {
        let inst = Instance {
            params: HeadParams::new(class_weights.clone(), uniform_vec(rng, dim, 2.0))?,
            batch: batch.clone(),
            delta: CHECK_DELTA,
        };
        if gate_margin_ok(&inst) {
            return Ok(inst);
        }
    }
    Err(Error::Invalid(
        "could not draw objectiveness weights clear of the gate".into(),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: LossKind,
    /// Loss value on the first instance.
    pub value: f64,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Settings for [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteOptions {
    pub seed: u64,
    pub dim: usize,
    pub batch: usize,
    pub instances: usize,
    /// Replace every drawn weight with zero.
    pub zero_weights: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    #[serde(flatten)]
    pub options: SuiteOptions,
    pub checks: Vec<LossCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Value of one loss on an instance.
pub fn loss_value(kind: LossKind, inst: &Instance) -> Result<f64> {
    let (p, b) = (&inst.params, &inst.batch);
    Ok(match kind {
        LossKind::Classification => cls_loss(p, b)?.loss,
        LossKind::VoidSuppression => void_suppression_loss(p, b)?.loss,
        LossKind::Objectiveness => objectiveness_loss(p, b)?.loss,
        LossKind::PseudoObjectiveness => pseudo_obj_loss(p, b, inst.delta)?.loss,
    })
}

/// Runs every loss on `instances` random instances (at least one) with
/// `n_thing` drawn per instance from 1..=4.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.batch == 0 {
        return Err(Error::EmptyBatch("candidate"));
    }
    if opts.instances == 0 {
        return Err(Error::Invalid("need at least one instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = [0.0f64; 4];
    let mut values = [0.0f64; 4];
    for i in 0..opts.instances {
        let n_thing = rng.gen_range(1..=4);
        let mut inst = random_instance(&mut rng, opts.dim, opts.batch, n_thing)?;
        if opts.zero_weights {
            inst.params = HeadParams::zeros(n_thing, opts.dim)?;
        }
        for (k, kind) in LossKind::ALL.into_iter().enumerate() {
            worst[k] = worst[k].max(check(kind, &inst, STEP)?);
            if i == 0 {
                values[k] = loss_value(kind, &inst)?;
            }
        }
    }
    Ok(SuiteReport {
        options: *opts,
        checks: LossKind::ALL
            .iter()
            .enumerate()
            .map(|(k, &loss)| LossCheck {
                loss,
                value: values[k],
                max_relative_error: worst[k],
                passed: worst[k] < TOLERANCE,
            })
            .collect(),
    })
}
