//! `params.json` plus raw `f32` sidecars for trained parameters.
//!
//! Matrices and vectors go to `<name>.f32` next to `params.json`, using the
//! bundle payload convention (little-endian, row-major, no header). Scalars
//! (α, raw α) are stored in the JSON at full precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{
    param, AdapterKind, AdapterWeights, Alpha, Construction, EnhancedBaseProjection, ImageResidual,
    TargetClassifierSpec, TaskResidual,
};
use crate::embedding_io::{read_f32_payload, read_json, write_f32_payload, write_json};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::trainer::TrainedModel;

pub const PARAMS_FILE: &str = "params.json";
pub const PARAMS_FORMAT: &str = "taskres-params/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AlphaRecord {
    Fixed { value: f64 },
    Learnable { raw: f64, value: f64 },
}

impl From<Alpha> for AlphaRecord {
    fn from(a: Alpha) -> Self {
        match a {
            Alpha::Fixed(value) => AlphaRecord::Fixed { value },
            Alpha::Learnable { raw } => AlphaRecord::Learnable {
                raw,
                value: raw.tanh(),
            },
        }
    }
}

impl From<&AlphaRecord> for Alpha {
    fn from(r: &AlphaRecord) -> Self {
        match *r {
            AlphaRecord::Fixed { value } => Alpha::Fixed(value),
            AlphaRecord::Learnable { raw, .. } => Alpha::Learnable { raw },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub kind: AdapterKind,
    pub hidden: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    /// `base`, `taskres`, `adapter-style` or `direct-adapter`.
    pub construction: String,
    pub variant: String,
    pub num_classes: usize,
    pub dim: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub alpha: Option<AlphaRecord>,
    #[serde(default)]
    pub adapter: Option<AdapterRecord>,
    #[serde(default)]
    pub image_residual: bool,
    /// Only set for an image residual used without a text residual.
    #[serde(default)]
    pub image_alpha: Option<AlphaRecord>,
    #[serde(default)]
    pub enhanced_projection: bool,
    pub tensors: BTreeMap<String, TensorRecord>,
}

fn tensor(name: &str, rows: usize, cols: usize) -> TensorRecord {
    TensorRecord {
        file: format!("{name}.f32"),
        rows,
        cols,
    }
}

/// Writes `model` into `dir` (created if missing).
pub fn write_params(
    dir: &Path,
    model: &TrainedModel,
    num_classes: usize,
    dim: usize,
) -> Result<()> {
    let spec = &model.spec;
    spec.validate(num_classes, dim)?;
    let mut payloads: Vec<(&str, (usize, usize), &[f64])> = Vec::new();
    let mut file = ParamsFile {
        format: PARAMS_FORMAT.into(),
        construction: String::new(),
        variant: spec.kind_name().into(),
        num_classes,
        dim,
        seed: Some(model.seed),
        alpha: None,
        adapter: None,
        image_residual: spec.image_side.is_some(),
        image_alpha: None,
        enhanced_projection: model.projection.is_some(),
        tensors: BTreeMap::new(),
    };
    match &spec.construction {
        Construction::Base => file.construction = "base".into(),
        Construction::TaskRes(r) => {
            file.construction = "taskres".into();
            file.alpha = Some(r.alpha.into());
            payloads.push((param::RESIDUAL, r.values.shape(), r.values.data()));
        }
        Construction::AdapterStyle(w) | Construction::DirectAdapter(w) => {
            file.construction = if matches!(spec.construction, Construction::AdapterStyle(_)) {
                "adapter-style".into()
            } else {
                "direct-adapter".into()
            };
            file.adapter = Some(AdapterRecord {
                kind: w.kind,
                hidden: w.hidden(),
                alpha: w.alpha,
            });
            payloads.push((param::ADAPTER_W1, w.w1.shape(), w.w1.data()));
            payloads.push((param::ADAPTER_W2, w.w2.shape(), w.w2.data()));
            if let Some(b) = &w.bias1 {
                payloads.push((param::ADAPTER_B1, (1, b.len()), b));
            }
            if let Some(b) = &w.bias2 {
                payloads.push((param::ADAPTER_B2, (1, b.len()), b));
            }
        }
        Construction::Projection(_) => {
            return Err(Error::invalid(
                "projection stage parameters are stored as enhanced_projection",
            ));
        }
    }
    if let Some(img) = &spec.image_side {
        if !matches!(spec.construction, Construction::TaskRes(_)) {
            file.image_alpha = Some(img.alpha.into());
        }
        payloads.push((param::IMAGE_RESIDUAL, (1, img.values.len()), &img.values));
    }
    if let Some(p) = &model.projection {
        if p.p.shape() != (dim, dim) {
            return Err(Error::ShapeMismatch {
                what: param::PROJECTION.into(),
                expected: (dim, dim),
                found: p.p.shape(),
            });
        }
        payloads.push((param::PROJECTION, p.p.shape(), p.p.data()));
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, (rows, cols), values) in payloads {
        let rec = tensor(name, rows, cols);
        write_f32_payload(&dir.join(&rec.file), values)?;
        file.tensors.insert(name.to_string(), rec);
    }
    write_json(&dir.join(PARAMS_FILE), &file)
}

fn load_tensor(dir: &Path, file: &ParamsFile, name: &str) -> Result<Matrix> {
    let rec = file
        .tensors
        .get(name)
        .ok_or_else(|| Error::invalid(format!("params file lists no tensor {name:?}")))?;
    if rec.file.contains(['/', '\\']) {
        return Err(Error::invalid(format!(
            "bad tensor file name {:?}",
            rec.file
        )));
    }
    let data = read_f32_payload(&dir.join(&rec.file), rec.rows * rec.cols)?;
    Matrix::new(rec.rows, rec.cols, data)
}

/// Reads a params file; the returned model is validated against the
/// dimensions it declares, not against any bundle.
pub fn read_params(path: &Path) -> Result<(ParamsFile, TrainedModel)> {
    let file: ParamsFile = read_json(path)?;
    if file.format != PARAMS_FORMAT {
        return Err(Error::invalid(format!(
            "unsupported params format {:?}",
            file.format
        )));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let (k, d) = (file.num_classes, file.dim);

    let construction = match file.construction.as_str() {
        "base" => Construction::Base,
        "taskres" => {
            let alpha = file
                .alpha
                .as_ref()
                .ok_or_else(|| Error::invalid("taskres params need an alpha"))?;
            Construction::TaskRes(TaskResidual {
                values: load_tensor(dir, &file, param::RESIDUAL)?,
                alpha: alpha.into(),
            })
        }
        kind @ ("adapter-style" | "direct-adapter") => {
            let rec = file
                .adapter
                .as_ref()
                .ok_or_else(|| Error::invalid("adapter params need an adapter record"))?;
            let vector = |name| -> Result<Option<Vec<f64>>> {
                Ok(if file.tensors.contains_key(name) {
                    Some(load_tensor(dir, &file, name)?.into_data())
                } else {
                    None
                })
            };
            let w = AdapterWeights {
                kind: rec.kind,
                w1: load_tensor(dir, &file, param::ADAPTER_W1)?,
                w2: load_tensor(dir, &file, param::ADAPTER_W2)?,
                bias1: vector(param::ADAPTER_B1)?,
                bias2: vector(param::ADAPTER_B2)?,
                alpha: rec.alpha,
            };
            if kind == "adapter-style" {
                Construction::AdapterStyle(w)
            } else {
                Construction::DirectAdapter(w)
            }
        }
        other => return Err(Error::invalid(format!("unknown construction {other:?}"))),
    };
    let mut spec = TargetClassifierSpec::new(construction);
    if file.image_residual {
        let alpha = match (&spec.construction, &file.image_alpha) {
            (Construction::TaskRes(r), _) => r.alpha,
            (_, Some(a)) => a.into(),
            (_, None) => return Err(Error::invalid("image residual params need an alpha")),
        };
        spec = spec.with_image_residual(ImageResidual {
            values: load_tensor(dir, &file, param::IMAGE_RESIDUAL)?.into_data(),
            alpha,
        });
    }
    spec.validate(k, d)?;
    let projection = if file.enhanced_projection {
        let p = load_tensor(dir, &file, param::PROJECTION)?;
        if p.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                what: param::PROJECTION.into(),
                expected: (d, d),
                found: p.shape(),
            });
        }
        Some(EnhancedBaseProjection { p })
    } else {
        None
    };
    let model = TrainedModel {
        seed: file.seed.unwrap_or(0),
        spec,
        projection,
    };
    Ok((file, model))
}
