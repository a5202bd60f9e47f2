//! Training objectives of the classification and objectiveness heads, each
//! returning the loss together with its analytic gradient.
//!
//! The classification head scores `n_thing + 1` classes (known things, then
//! background) with logits `W f`; the objectiveness head scores one logit
//! `θ·f`. Features are fixed inputs.

use crate::error::{Error, Result};
use crate::math::{dot, log_sigmoid, logsumexp, sigmoid, softplus};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("matrix rows differ in length".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self · v` for a vector of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `(n_thing + 1) × D`; the last row is background.
    pub class_weights: Matrix,
    /// Length `D`.
    pub obj_weights: Vec<f64>,
}

impl HeadParams {
    pub fn new(class_weights: Matrix, obj_weights: Vec<f64>) -> Result<Self> {
        if class_weights.cols() == 0 || class_weights.rows() < 2 {
            return Err(Error::Invalid(
                "classification head needs at least one thing class plus background and D > 0"
                    .into(),
            ));
        }
        if obj_weights.len() != class_weights.cols() {
            return Err(Error::Invalid(format!(
                "objectiveness weights have length {}, expected {}",
                obj_weights.len(),
                class_weights.cols()
            )));
        }
        if !class_weights.as_slice().iter().chain(&obj_weights).all(|v| v.is_finite()) {
            return Err(Error::Invalid("head weights must be finite".into()));
        }
        Ok(Self {
            class_weights,
            obj_weights,
        })
    }

    pub fn zeros(n_thing: usize, dim: usize) -> Result<Self> {
        Self::new(Matrix::zeros(n_thing + 1, dim), vec![0.0; dim])
    }

    pub fn n_thing(&self) -> usize {
        self.class_weights.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.class_weights.cols()
    }

    pub fn background(&self) -> usize {
        self.n_thing()
    }
}

/// Training label of one proposal; `Thing` holds the known-class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Thing(usize),
    Void,
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoleCounts {
    pub thing: usize,
    pub void: usize,
    pub background: usize,
}

impl RoleCounts {
    /// Proposals other than void.
    pub fn non_void(&self) -> usize {
        self.thing + self.background
    }
}

impl Batch {
    pub fn new(features: Vec<Vec<f64>>, targets: Vec<Target>) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::Invalid(format!(
                "{} feature vectors for {} targets",
                features.len(),
                targets.len()
            )));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn counts(&self) -> RoleCounts {
        let mut c = RoleCounts::default();
        for t in &self.targets {
            match t {
                Target::Thing(_) => c.thing += 1,
                Target::Void => c.void += 1,
                Target::Background => c.background += 1,
            }
        }
        c
    }

    fn check(&self, params: &HeadParams) -> Result<()> {
        let d = params.dim();
        for (i, (f, t)) in self.features.iter().zip(&self.targets).enumerate() {
            if f.len() != d {
                return Err(Error::Invalid(format!(
                    "feature {i} has length {}, expected {d}",
                    f.len()
                )));
            }
            if let Target::Thing(k) = *t {
                if k >= params.n_thing() {
                    return Err(Error::Invalid(format!(
                        "target class {k} of proposal {i} exceeds {} thing classes",
                        params.n_thing()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassLoss {
    pub loss: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoObjLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Void proposals passing the confidence gate.
    pub kept: usize,
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Softmax cross-entropy over known things and background, averaged over
/// non-void proposals.
pub fn cls_loss(params: &HeadParams, batch: &Batch) -> Result<ClassLoss> {
    batch.check(params)?;
    let n = batch.counts().non_void();
    if n == 0 {
        return Err(Error::EmptyBatch("non-void"));
    }
    let scale = 1.0 / n as f64;
    let mut grad = Matrix::zeros(params.class_weights.rows(), params.dim());
    let mut loss = 0.0;
    for (f, t) in batch.features.iter().zip(&batch.targets) {
        let y = match *t {
            Target::Thing(k) => k,
            Target::Background => params.background(),
            Target::Void => continue,
        };
        let z = params.class_weights.mul_vec(f);
        let lse = logsumexp(&z);
        loss += lse - z[y];
        for (j, &zj) in z.iter().enumerate() {
            let p = (zj - lse).exp();
            let g = p - (j == y) as u8 as f64;
            axpy(grad.row_mut(j), scale * g, f);
        }
    }
    Ok(ClassLoss {
        loss: loss * scale,
        grad,
    })
}

/// Pushes every known-thing probability of void proposals down:
/// mean over void proposals of `-Σ_k ln(1 - p_k)`, background excluded from
/// the sum but present in the softmax.
pub fn void_suppression_loss(params: &HeadParams, batch: &Batch) -> Result<ClassLoss> {
    batch.check(params)?;
    let n = batch.counts().void;
    if n == 0 {
        return Err(Error::EmptyBatch("void"));
    }
    let scale = 1.0 / n as f64;
    let n_thing = params.n_thing();
    let mut grad = Matrix::zeros(params.class_weights.rows(), params.dim());
    let mut loss = 0.0;
    let mut rest = Vec::with_capacity(n_thing);
    for (f, t) in batch.features.iter().zip(&batch.targets) {
        if *t != Target::Void {
            continue;
        }
        let z = params.class_weights.mul_vec(f);
        let lse = logsumexp(&z);
        // q_k = p_k / (1 - p_k) = exp(z_k - lse_{j != k})
        let mut q_sum = 0.0;
        let mut q = Vec::with_capacity(n_thing);
        for k in 0..n_thing {
            rest.clear();
            rest.extend(z.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &v)| v));
            let lse_rest = logsumexp(&rest);
            loss += lse - lse_rest;
            let qk = (z[k] - lse_rest).exp();
            q.push(qk);
            q_sum += qk;
        }
        for (m, &zm) in z.iter().enumerate() {
            let p = (zm - lse).exp();
            let g = if m < n_thing {
                p * (1.0 - (q_sum - q[m]))
            } else {
                -p * q_sum
            };
            axpy(grad.row_mut(m), scale * g, f);
        }
    }
    Ok(ClassLoss {
        loss: loss * scale,
        grad,
    })
}

/// Binary objectiveness loss: things are positives, background negatives,
/// void proposals excluded; averaged over non-void proposals.
pub fn objectiveness_loss(params: &HeadParams, batch: &Batch) -> Result<ObjLoss> {
    batch.check(params)?;
    let n = batch.counts().non_void();
    if n == 0 {
        return Err(Error::EmptyBatch("known-thing or background"));
    }
    let scale = 1.0 / n as f64;
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    for (f, t) in batch.features.iter().zip(&batch.targets) {
        let s = dot(&params.obj_weights, f);
        let g = match t {
            Target::Thing(_) => {
                loss += softplus(-s);
                sigmoid(s) - 1.0
            }
            Target::Background => {
                loss += softplus(s);
                sigmoid(s)
            }
            Target::Void => continue,
        };
        axpy(&mut grad, scale * g, f);
    }
    Ok(ObjLoss {
        loss: loss * scale,
        grad,
    })
}

/// Pseudo-label objectiveness loss on void proposals: those with
/// `σ(θ·f) ≥ delta` are treated as positives. The gate carries no gradient,
/// and the sum is divided by the number of all void proposals, kept or not.
pub fn pseudo_obj_loss(params: &HeadParams, batch: &Batch, delta: f64) -> Result<PseudoObjLoss> {
    batch.check(params)?;
    let n = batch.counts().void;
    if n == 0 {
        return Err(Error::EmptyBatch("void"));
    }
    let scale = 1.0 / n as f64;
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    let mut kept = 0;
    for (f, t) in batch.features.iter().zip(&batch.targets) {
        if *t != Target::Void {
            continue;
        }
        let s = dot(&params.obj_weights, f);
        let conf = sigmoid(s);
        if conf >= delta {
            kept += 1;
            loss -= log_sigmoid(s);
            axpy(&mut grad, scale * (conf - 1.0), f);
        }
    }
    Ok(PseudoObjLoss {
        loss: loss * scale,
        grad,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(targets: Vec<Target>, dim: usize) -> Batch {
        let features = (0..targets.len())
            .map(|i| (0..dim).map(|j| ((i * dim + j) as f64 * 0.37).sin()).collect())
            .collect();
        Batch::new(features, targets).unwrap()
    }

    #[test]
    fn zero_weight_cls_loss() {
        let p = HeadParams::zeros(1, 3).unwrap();
        let l = cls_loss(&p, &batch(vec![Target::Thing(0)], 3)).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
        let p = HeadParams::zeros(3, 3).unwrap();
        let l = cls_loss(&p, &batch(vec![Target::Background], 3)).unwrap();
        assert!((l.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_void_suppression() {
        let p = HeadParams::zeros(1, 2).unwrap();
        let l = void_suppression_loss(&p, &batch(vec![Target::Void], 2)).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
        let p = HeadParams::zeros(2, 2).unwrap();
        let l = void_suppression_loss(&p, &batch(vec![Target::Void; 3], 2)).unwrap();
        assert!((l.loss - 2.0 * 1.5f64.ln()).abs() < 1e-12);
        assert!((l.loss - 0.8109).abs() < 1e-4);
    }

    #[test]
    fn zero_weight_objectiveness() {
        let p = HeadParams::zeros(2, 2).unwrap();
        let l = objectiveness_loss(&p, &batch(vec![Target::Thing(0), Target::Background], 2))
            .unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
        let l = objectiveness_loss(&p, &batch(vec![Target::Thing(1); 5], 2)).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_pseudo() {
        let p = HeadParams::zeros(2, 2).unwrap();
        let b = batch(vec![Target::Void, Target::Void], 2);
        let l = pseudo_obj_loss(&p, &b, 0.5).unwrap();
        assert_eq!(l.kept, 2);
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
        let l = pseudo_obj_loss(&p, &b, 0.6).unwrap();
        assert_eq!((l.kept, l.loss), (0, 0.0));
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_batches() {
        let p = HeadParams::zeros(1, 2).unwrap();
        let voids = batch(vec![Target::Void], 2);
        let things = batch(vec![Target::Thing(0)], 2);
        assert!(matches!(cls_loss(&p, &voids), Err(Error::EmptyBatch(_))));
        assert!(matches!(objectiveness_loss(&p, &voids), Err(Error::EmptyBatch(_))));
        assert!(matches!(void_suppression_loss(&p, &things), Err(Error::EmptyBatch(_))));
        assert!(matches!(pseudo_obj_loss(&p, &things, 0.5), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn bad_shapes() {
        let p = HeadParams::zeros(1, 2).unwrap();
        assert!(cls_loss(&p, &batch(vec![Target::Thing(3)], 2)).is_err());
        assert!(cls_loss(&p, &batch(vec![Target::Thing(0)], 3)).is_err());
        assert!(HeadParams::zeros(0, 2).is_err());
        assert!(HeadParams::new(Matrix::zeros(2, 2), vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn losses_vanish_in_the_limit() {
        let mut p = HeadParams::zeros(2, 1).unwrap();
        let b = Batch::new(vec![vec![1.0]], vec![Target::Thing(1)]).unwrap();
        p.class_weights.row_mut(1)[0] = 60.0;
        assert!(cls_loss(&p, &b).unwrap().loss < 1e-20);

        let mut p = HeadParams::zeros(2, 1).unwrap();
        let b = Batch::new(vec![vec![1.0]], vec![Target::Void]).unwrap();
        p.class_weights.row_mut(2)[0] = 60.0;
        assert!(void_suppression_loss(&p, &b).unwrap().loss < 1e-20);
    }

    #[test]
    fn extreme_logits_are_finite() {
        let mut p = HeadParams::zeros(2, 1).unwrap();
        p.class_weights.row_mut(0)[0] = 700.0;
        p.class_weights.row_mut(1)[0] = -700.0;
        p.obj_weights[0] = -700.0;
        let b = Batch::new(
            vec![vec![1.0], vec![1.0], vec![1.0]],
            vec![Target::Thing(1), Target::Void, Target::Background],
        )
        .unwrap();
        assert!(cls_loss(&p, &b).unwrap().loss.is_finite());
        assert!(void_suppression_loss(&p, &b).unwrap().loss.is_finite());
        assert!(objectiveness_loss(&p, &b).unwrap().loss.is_finite());
        p.obj_weights[0] = 700.0;
        assert!(pseudo_obj_loss(&p, &b, 0.5).unwrap().loss.is_finite());
    }
}
