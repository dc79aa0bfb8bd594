//! Target classifier constructions and cosine-softmax prediction.
//!
//! Every construction starts from a frozen, unit-norm base classifier `t`
//! (K×D) and produces an unnormalized `t'`:
//!
//! | construction   | `t'`              |
//! |----------------|-------------------|
//! | `Base`         | `t`               |
//! | `TaskRes`      | `t + α·x`         |
//! | `DirectAdapter`| `φ(t)`            |
//! | `AdapterStyle` | `t + α·φ(t)`      |
//! | `Projection`   | `t·P`             |
//!
//! with `φ(t) = act(t·W₁ + b₁)·W₂ + b₂`. Prediction re-normalizes `t'` row-wise
//! and scores `softmax(cos(z, t'ₖ)/τ)`.

use serde::{Deserialize, Serialize};

use crate::embedding_io::{normalize_row, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::{tag, SplitMix64};

/// Names of tunable parameter sets, as used in gradient maps and params files.
pub mod param {
    pub const RESIDUAL: &str = "residual";
    pub const ALPHA_RAW: &str = "alpha_raw";
    pub const ADAPTER_W1: &str = "adapter.w1";
    pub const ADAPTER_B1: &str = "adapter.bias1";
    pub const ADAPTER_W2: &str = "adapter.w2";
    pub const ADAPTER_B2: &str = "adapter.bias2";
    pub const PROJECTION: &str = "projection";
    pub const IMAGE_RESIDUAL: &str = "image_residual";
    pub const IMAGE_ALPHA_RAW: &str = "image_alpha_raw";
}

/// Default scaling factor for residuals.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Fixed(f64),
    /// Effective value is `tanh(raw)`.
    Learnable {
        raw: f64,
    },
}

impl Alpha {
    /// Learnable scaling starting at `tanh(raw) = 0.5`.
    pub fn learnable() -> Self {
        Alpha::Learnable {
            raw: DEFAULT_ALPHA.atanh(),
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Alpha::Fixed(a) => a,
            Alpha::Learnable { raw } => raw.tanh(),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Alpha::Learnable { .. })
    }

    /// d value / d raw; zero for a fixed factor.
    pub(crate) fn raw_derivative(&self) -> f64 {
        match *self {
            Alpha::Fixed(_) => 0.0,
            Alpha::Learnable { raw } => {
                let t = raw.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Additive, prior-independent residual on the base classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResidual {
    pub values: Matrix,
    pub alpha: Alpha,
}

impl TaskResidual {
    pub fn zeros(num_classes: usize, dim: usize, alpha: Alpha) -> Self {
        Self {
            values: Matrix::zeros(num_classes, dim),
            alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// Two linear maps with a ReLU between them and no biases.
    #[default]
    Nonlinear,
    Linear,
    LinearBias,
}

impl AdapterKind {
    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::Nonlinear => "nonlinear",
            AdapterKind::Linear => "linear",
            AdapterKind::LinearBias => "linear-bias",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub kind: AdapterKind,
    /// D×H
    pub w1: Matrix,
    /// H×D
    pub w2: Matrix,
    pub bias1: Option<Vec<f64>>,
    pub bias2: Option<Vec<f64>>,
    /// Mixing factor for the adapter-style construction.
    pub alpha: f64,
}

impl AdapterWeights {
    /// Seeded fan-in uniform init; biases (when present) start at zero.
    pub fn init(
        kind: AdapterKind,
        dim: usize,
        hidden: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if hidden < 1 || dim < 1 {
            return Err(Error::invalid("adapter dimensions must be at least 1"));
        }
        let mut g = SplitMix64::stream(seed, tag::ADAPTER_INIT);
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| (2.0 * g.uniform() - 1.0) * bound)
                .collect();
            Matrix::new(rows, cols, data)
        };
        let w1 = draw(dim, hidden, dim)?;
        let w2 = draw(hidden, dim, hidden)?;
        let with_bias = kind == AdapterKind::LinearBias;
        Ok(Self {
            kind,
            w1,
            w2,
            bias1: with_bias.then(|| vec![0.0; hidden]),
            bias2: with_bias.then(|| vec![0.0; dim]),
            alpha,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let h = self.w1.cols();
        if h < 1 {
            return Err(Error::invalid("adapter hidden width must be at least 1"));
        }
        if self.w1.rows() != dim {
            return Err(Error::ShapeMismatch {
                what: param::ADAPTER_W1.into(),
                expected: (dim, h),
                found: self.w1.shape(),
            });
        }
        if self.w2.shape() != (h, dim) {
            return Err(Error::ShapeMismatch {
                what: param::ADAPTER_W2.into(),
                expected: (h, dim),
                found: self.w2.shape(),
            });
        }
        let with_bias = self.kind == AdapterKind::LinearBias;
        if with_bias != self.bias1.is_some() || with_bias != self.bias2.is_some() {
            return Err(Error::invalid(format!(
                "{} adapter {} biases",
                self.kind.name(),
                if with_bias {
                    "requires"
                } else {
                    "must not have"
                }
            )));
        }
        if let Some(b) = &self.bias1 {
            if b.len() != h {
                return Err(Error::ShapeMismatch {
                    what: param::ADAPTER_B1.into(),
                    expected: (1, h),
                    found: (1, b.len()),
                });
            }
        }
        if let Some(b) = &self.bias2 {
            if b.len() != dim {
                return Err(Error::ShapeMismatch {
                    what: param::ADAPTER_B2.into(),
                    expected: (1, dim),
                    found: (1, b.len()),
                });
            }
        }
        Ok(())
    }
}

/// Square text-side projection, identity at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedBaseProjection {
    pub p: Matrix,
}

impl EnhancedBaseProjection {
    pub fn identity(dim: usize) -> Self {
        Self {
            p: Matrix::identity(dim),
        }
    }
}

/// One task-level vector added to every image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResidual {
    pub values: Vec<f64>,
    /// Ignored when paired with a `TaskRes` construction, which shares its α.
    pub alpha: Alpha,
}

impl ImageResidual {
    pub fn zeros(dim: usize, alpha: Alpha) -> Self {
        Self {
            values: vec![0.0; dim],
            alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Construction {
    Base,
    DirectAdapter(AdapterWeights),
    AdapterStyle(AdapterWeights),
    TaskRes(TaskResidual),
    /// Enhanced-base stage: `t' = t·P`.
    Projection(EnhancedBaseProjection),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetClassifierSpec {
    pub construction: Construction,
    pub image_side: Option<ImageResidual>,
}

/// Mutable view of one tunable parameter set.
pub struct ParamMut<'a> {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub values: &'a mut [f64],
}

/// Read-only view of one tunable parameter set.
pub struct ParamRef<'a> {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub values: &'a [f64],
}

impl TargetClassifierSpec {
    pub fn base() -> Self {
        Self::new(Construction::Base)
    }

    pub fn new(construction: Construction) -> Self {
        Self {
            construction,
            image_side: None,
        }
    }

    pub fn with_image_residual(mut self, r: ImageResidual) -> Self {
        self.image_side = Some(r);
        self
    }

    pub fn kind_name(&self) -> &'static str {
        match (&self.construction, self.image_side.is_some()) {
            (Construction::Base, false) => "base",
            (Construction::Base, true) => "taskres-i",
            (Construction::TaskRes(_), false) => "taskres-t",
            (Construction::TaskRes(_), true) => "taskres-it",
            (Construction::AdapterStyle(_), _) => "adapter-style",
            (Construction::DirectAdapter(_), _) => "direct-adapter",
            (Construction::Projection(_), _) => "projection",
        }
    }

    pub fn residual(&self) -> Option<&TaskResidual> {
        match &self.construction {
            Construction::TaskRes(r) => Some(r),
            _ => None,
        }
    }

    /// Effective α applied to the image residual, if there is one.
    pub fn image_alpha(&self) -> Option<f64> {
        let img = self.image_side.as_ref()?;
        Some(match &self.construction {
            Construction::TaskRes(r) => r.alpha.value(),
            _ => img.alpha.value(),
        })
    }

    pub(crate) fn image_alpha_raw_derivative(&self) -> f64 {
        match (&self.construction, &self.image_side) {
            (Construction::TaskRes(r), Some(_)) => r.alpha.raw_derivative(),
            (_, Some(img)) => img.alpha.raw_derivative(),
            _ => 0.0,
        }
    }

    /// Checks parameter shapes against a K×D base.
    pub fn validate(&self, num_classes: usize, dim: usize) -> Result<()> {
        match &self.construction {
            Construction::Base => {}
            Construction::TaskRes(r) => {
                if r.values.shape() != (num_classes, dim) {
                    return Err(Error::ShapeMismatch {
                        what: param::RESIDUAL.into(),
                        expected: (num_classes, dim),
                        found: r.values.shape(),
                    });
                }
                if !r.alpha.value().is_finite() {
                    return Err(Error::NonFinite("alpha".into()));
                }
            }
            Construction::AdapterStyle(w) | Construction::DirectAdapter(w) => w.validate(dim)?,
            Construction::Projection(p) => {
                if p.p.shape() != (dim, dim) {
                    return Err(Error::ShapeMismatch {
                        what: param::PROJECTION.into(),
                        expected: (dim, dim),
                        found: p.p.shape(),
                    });
                }
            }
        }
        if let Some(img) = &self.image_side {
            if img.values.len() != dim {
                return Err(Error::ShapeMismatch {
                    what: param::IMAGE_RESIDUAL.into(),
                    expected: (1, dim),
                    found: (1, img.values.len()),
                });
            }
        }
        Ok(())
    }

    pub fn tunable(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<ParamRef<'_>> = Vec::new();
        let mut push = |name, shape, values| {
            out.push(ParamRef {
                name,
                shape,
                values,
            })
        };
        // Kept in the same order as `tunable_mut`.
        match &self.construction {
            Construction::Base => {}
            Construction::TaskRes(r) => {
                push(param::RESIDUAL, r.values.shape(), r.values.data());
                if let Alpha::Learnable { raw } = &r.alpha {
                    push(param::ALPHA_RAW, (1, 1), std::slice::from_ref(raw));
                }
            }
            Construction::AdapterStyle(w) | Construction::DirectAdapter(w) => {
                push(param::ADAPTER_W1, w.w1.shape(), w.w1.data());
                if let Some(b) = &w.bias1 {
                    push(param::ADAPTER_B1, (1, b.len()), b);
                }
                push(param::ADAPTER_W2, w.w2.shape(), w.w2.data());
                if let Some(b) = &w.bias2 {
                    push(param::ADAPTER_B2, (1, b.len()), b);
                }
            }
            Construction::Projection(p) => push(param::PROJECTION, p.p.shape(), p.p.data()),
        }
        let shares_alpha = matches!(self.construction, Construction::TaskRes(_));
        if let Some(img) = &self.image_side {
            push(param::IMAGE_RESIDUAL, (1, img.values.len()), &img.values);
            if let (Alpha::Learnable { raw }, false) = (&img.alpha, shares_alpha) {
                push(param::IMAGE_ALPHA_RAW, (1, 1), std::slice::from_ref(raw));
            }
        }
        out
    }

    pub fn tunable_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        let shares_alpha = matches!(self.construction, Construction::TaskRes(_));
        match &mut self.construction {
            Construction::Base => {}
            Construction::TaskRes(r) => {
                let shape = r.values.shape();
                out.push(ParamMut {
                    name: param::RESIDUAL,
                    shape,
                    values: r.values.data_mut(),
                });
                if let Alpha::Learnable { raw } = &mut r.alpha {
                    out.push(ParamMut {
                        name: param::ALPHA_RAW,
                        shape: (1, 1),
                        values: std::slice::from_mut(raw),
                    });
                }
            }
            Construction::AdapterStyle(w) | Construction::DirectAdapter(w) => {
                let s1 = w.w1.shape();
                let s2 = w.w2.shape();
                out.push(ParamMut {
                    name: param::ADAPTER_W1,
                    shape: s1,
                    values: w.w1.data_mut(),
                });
                if let Some(b) = &mut w.bias1 {
                    out.push(ParamMut {
                        name: param::ADAPTER_B1,
                        shape: (1, b.len()),
                        values: b,
                    });
                }
                out.push(ParamMut {
                    name: param::ADAPTER_W2,
                    shape: s2,
                    values: w.w2.data_mut(),
                });
                if let Some(b) = &mut w.bias2 {
                    out.push(ParamMut {
                        name: param::ADAPTER_B2,
                        shape: (1, b.len()),
                        values: b,
                    });
                }
            }
            Construction::Projection(p) => {
                let shape = p.p.shape();
                out.push(ParamMut {
                    name: param::PROJECTION,
                    shape,
                    values: p.p.data_mut(),
                });
            }
        }
        if let Some(img) = &mut self.image_side {
            let d = img.values.len();
            out.push(ParamMut {
                name: param::IMAGE_RESIDUAL,
                shape: (1, d),
                values: &mut img.values,
            });
            if let (Alpha::Learnable { raw }, false) = (&mut img.alpha, shares_alpha) {
                out.push(ParamMut {
                    name: param::IMAGE_ALPHA_RAW,
                    shape: (1, 1),
                    values: std::slice::from_mut(raw),
                });
            }
        }
        out
    }

    /// Rounds every tunable value to `f32`, the precision of exported params.
    pub fn round_to_f32(&mut self) {
        for p in self.tunable_mut() {
            for v in p.values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Image embeddings as seen by the classifier (image residual applied).
    pub fn transform_images(&self, z: &Matrix) -> Result<Matrix> {
        match &self.image_side {
            None => Ok(z.clone()),
            Some(img) => shift_rows(z, &img.values, self.image_alpha().unwrap_or(0.0)),
        }
    }

    /// Predicted labels for every row of `z`.
    pub fn predict(&self, base: &EmbeddingMatrix, z: &Matrix, tau: f64) -> Result<Vec<usize>> {
        let t_prime = build_target_classifier(base, self)?;
        let z = self.transform_images(z)?;
        predict_labels(&z, &t_prime, tau)
    }
}

pub fn build_target_classifier(
    base: &EmbeddingMatrix,
    spec: &TargetClassifierSpec,
) -> Result<Matrix> {
    spec.validate(base.rows(), base.dim())?;
    let t = base.as_matrix();
    match &spec.construction {
        Construction::Base => Ok(t.clone()),
        Construction::TaskRes(r) => {
            let a = r.alpha.value();
            let mut out = t.clone();
            for (o, x) in out.data_mut().iter_mut().zip(r.values.data()) {
                *o += a * x;
            }
            Ok(out)
        }
        Construction::DirectAdapter(w) => adapter_transform(t, w),
        Construction::AdapterStyle(w) => {
            let phi = adapter_transform(t, w)?;
            let mut out = t.clone();
            for (o, p) in out.data_mut().iter_mut().zip(phi.data()) {
                *o += w.alpha * p;
            }
            Ok(out)
        }
        Construction::Projection(p) => t.matmul(&p.p),
    }
}

/// Hidden pre-activation `t·W₁ + b₁`.
pub(crate) fn adapter_hidden_pre(t: &Matrix, w: &AdapterWeights) -> Result<Matrix> {
    let mut h = t.matmul(&w.w1)?;
    if let Some(b) = &w.bias1 {
        for r in 0..h.rows() {
            for (v, bj) in h.row_mut(r).iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    Ok(h)
}

pub(crate) fn adapter_activation(kind: AdapterKind, pre: &Matrix) -> Matrix {
    let mut h = pre.clone();
    if kind == AdapterKind::Nonlinear {
        for v in h.data_mut() {
            *v = v.max(0.0);
        }
    }
    h
}

pub fn adapter_transform(t: &Matrix, w: &AdapterWeights) -> Result<Matrix> {
    w.validate(t.cols())?;
    let h = adapter_activation(w.kind, &adapter_hidden_pre(t, w)?);
    let mut out = h.matmul(&w.w2)?;
    if let Some(b) = &w.bias2 {
        for r in 0..out.rows() {
            for (v, bj) in out.row_mut(r).iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    Ok(out)
}

fn shift_rows(z: &Matrix, values: &[f64], alpha: f64) -> Result<Matrix> {
    if values.len() != z.cols() {
        return Err(Error::ShapeMismatch {
            what: param::IMAGE_RESIDUAL.into(),
            expected: (1, z.cols()),
            found: (1, values.len()),
        });
    }
    let mut out = z.clone();
    for r in 0..out.rows() {
        for (v, x) in out.row_mut(r).iter_mut().zip(values) {
            *v += alpha * x;
        }
    }
    Ok(out)
}

/// `zᵢ + α·r` for every row; not re-normalized.
pub fn apply_image_residual(z: &Matrix, r: &ImageResidual) -> Result<Matrix> {
    shift_rows(z, &r.values, r.alpha.value())
}

/// Row-normalized copy of `m` plus the original row norms.
pub(crate) fn unit_rows(m: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut data = Vec::with_capacity(m.data().len());
    let mut norms = Vec::with_capacity(m.rows());
    for (i, row) in m.row_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} row {i}")));
        }
        let (unit, n) = normalize_row(row).ok_or_else(|| Error::ZeroNorm {
            what: what.into(),
            row: i,
        })?;
        data.extend(unit);
        norms.push(n);
    }
    Ok((Matrix::new(m.rows(), m.cols(), data)?, norms))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Softmax of `cos/τ` for unit vectors, with max subtraction.
pub(crate) fn softmax_unit(z_hat: &[f64], classes: &Matrix, tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = classes.row_iter().map(|t| dot(z_hat, t) / tau).collect();
    softmax(&logits)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Class probabilities for one image embedding.
pub fn predict_probs(z_row: &[f64], t_prime: &Matrix, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if z_row.len() != t_prime.cols() {
        return Err(Error::DimensionMismatch {
            what: "image embedding".into(),
            expected: t_prime.cols(),
            found: z_row.len(),
        });
    }
    let (z_hat, _) = normalize_row(z_row).ok_or_else(|| Error::ZeroNorm {
        what: "image embedding".into(),
        row: 0,
    })?;
    let (units, _) = unit_rows(t_prime, "target classifier")?;
    Ok(softmax_unit(&z_hat, &units, tau))
}

/// N×K class probabilities for every row of `z`.
pub fn predict_probs_batch(z: &Matrix, t_prime: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    if z.cols() != t_prime.cols() {
        return Err(Error::DimensionMismatch {
            what: "image embeddings".into(),
            expected: t_prime.cols(),
            found: z.cols(),
        });
    }
    let (units, _) = unit_rows(t_prime, "target classifier")?;
    let (z_hat, _) = unit_rows(z, "image embeddings")?;
    let mut data = Vec::with_capacity(z.rows() * t_prime.rows());
    for row in z_hat.row_iter() {
        data.extend(softmax_unit(row, &units, tau));
    }
    Matrix::new(z.rows(), t_prime.rows(), data)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-row argmax of the class probabilities.
///
/// Ranked on cosine similarity directly, which orders classes exactly as the
/// softmax does but is independent of `τ`.
pub fn predict_labels(z: &Matrix, t_prime: &Matrix, tau: f64) -> Result<Vec<usize>> {
    check_tau(tau)?;
    if z.cols() != t_prime.cols() {
        return Err(Error::DimensionMismatch {
            what: "image embeddings".into(),
            expected: t_prime.cols(),
            found: z.cols(),
        });
    }
    let (units, _) = unit_rows(t_prime, "target classifier")?;
    let (z_hat, _) = unit_rows(z, "image embeddings")?;
    Ok(z_hat
        .row_iter()
        .map(|zr| {
            let sims: Vec<f64> = units.row_iter().map(|t| dot(zr, t)).collect();
            argmax(&sims)
        })
        .collect())
}
