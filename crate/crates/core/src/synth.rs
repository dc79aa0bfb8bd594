//! Synthetic bundles with a controllable misalignment between the stored
//! base classifier and the true class directions.
//!
//! Generation, per spec:
//! 1. K true directions: standard Gaussian D-vectors, normalized
//!    (stream `DIRECTIONS`).
//! 2. Base row k = normalize(trueₖ + shift·gₖ), gₖ standard Gaussian
//!    (stream `BASE_NOISE`; drawn even when `shift = 0`).
//! 3. Image rows: class-major, `train_per_class` train rows then
//!    `test_per_class` test rows per class, each normalize(trueₖ + noise·g)
//!    (stream `SAMPLE_NOISE`, train split fully before test split).
//! 4. Every value is rounded to `f32`, the storage precision, so a bundle
//!    reads back from disk exactly as generated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding_io::{normalize_row, Bundle, EmbeddingMatrix, LabeledEmbeddings};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{tag, SplitMix64};

pub const DEFAULT_SYNTH_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shift: f64,
    pub sample_noise: f64,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 32,
            train_per_class: 64,
            test_per_class: 100,
            shift: 0.8,
            sample_noise: 0.3,
            seed: 0,
            temperature: DEFAULT_SYNTH_TEMPERATURE,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic bundles need at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("synthetic bundles need dim >= 2"));
        }
        if self.train_per_class < 1 || self.test_per_class < 1 {
            return Err(Error::invalid(
                "train and test rows per class must be at least 1",
            ));
        }
        if !(self.shift.is_finite() && self.shift >= 0.0) {
            return Err(Error::invalid(format!(
                "shift must be >= 0, got {}",
                self.shift
            )));
        }
        if !(self.sample_noise.is_finite() && self.sample_noise >= 0.0) {
            return Err(Error::invalid(format!(
                "sample noise must be >= 0, got {}",
                self.sample_noise
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn gaussian_vec(g: &mut SplitMix64, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| g.gaussian()).collect()
}

fn perturbed_unit(center: &[f64], scale: f64, g: &mut SplitMix64) -> Result<Vec<f64>> {
    let noise = gaussian_vec(g, center.len());
    let v: Vec<f64> = center
        .iter()
        .zip(&noise)
        .map(|(c, n)| c + scale * n)
        .collect();
    normalize_row(&v)
        .map(|(u, _)| u)
        .ok_or_else(|| Error::numerical("synthetic generator", "degenerate zero-norm draw"))
}

/// The K unit-norm class directions the bundle is built around.
pub fn true_directions(spec: &SynthSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut g = SplitMix64::stream(spec.seed, tag::DIRECTIONS);
    let rows = (0..spec.num_classes)
        .map(|_| {
            normalize_row(&gaussian_vec(&mut g, spec.dim))
                .map(|(u, _)| u)
                .ok_or_else(|| Error::numerical("synthetic generator", "degenerate direction"))
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn to_storage(rows: Vec<Vec<f64>>) -> Result<EmbeddingMatrix> {
    let mut m = Matrix::from_rows(&rows)?;
    m.round_to_f32();
    EmbeddingMatrix::try_from(m)
}

pub fn generate(spec: &SynthSpec) -> Result<Bundle> {
    let truth = true_directions(spec)?;
    let (k, d) = (spec.num_classes, spec.dim);

    let mut g = SplitMix64::stream(spec.seed, tag::BASE_NOISE);
    let base = (0..k)
        .map(|c| perturbed_unit(truth.row(c), spec.shift, &mut g))
        .collect::<Result<Vec<_>>>()?;

    let mut g = SplitMix64::stream(spec.seed, tag::SAMPLE_NOISE);
    let mut splits = BTreeMap::new();
    for (name, per_class) in [
        ("train", spec.train_per_class),
        ("test", spec.test_per_class),
    ] {
        let mut rows = Vec::with_capacity(k * per_class);
        let mut labels = Vec::with_capacity(k * per_class);
        for c in 0..k {
            for _ in 0..per_class {
                rows.push(perturbed_unit(truth.row(c), spec.sample_noise, &mut g)?);
                labels.push(c);
            }
        }
        splits.insert(
            name.to_string(),
            LabeledEmbeddings::new(to_storage(rows)?, labels, k)?,
        );
    }

    let names = (0..k).map(|c| format!("class_{c}")).collect();
    let mut bundle = Bundle::new(names, spec.temperature, to_storage(base)?, splits)?;
    debug_assert_eq!(bundle.base.dim(), d);
    bundle.manifest.metadata.insert(
        "generator".into(),
        serde_json::to_value(spec).map_err(|e| Error::invalid(e.to_string()))?,
    );
    Ok(bundle)
}

/// One bundle per shift. All bundles share true directions and image
/// samples; only the base classifier changes.
pub fn difficulty_ladder(base_spec: &SynthSpec, shifts: &[f64]) -> Result<Vec<Bundle>> {
    if shifts.is_empty() {
        return Err(Error::invalid("difficulty ladder needs at least one shift"));
    }
    if shifts.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("shifts must be non-negative"));
    }
    if shifts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("shifts must be strictly increasing"));
    }
    shifts
        .iter()
        .map(|&shift| {
            generate(&SynthSpec {
                shift,
                ..base_spec.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::TargetClassifierSpec;
    use crate::matrix::{dot, norm};
    use crate::trainer::evaluate;

    fn zero_shot(b: &Bundle) -> f64 {
        let b = b.normalized().unwrap();
        evaluate(
            b.split("test").unwrap(),
            &b.base,
            &TargetClassifierSpec::base(),
            b.temperature(),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let spec = SynthSpec {
            seed: 4,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        for m in [
            &a.base,
            &a.split("train").unwrap().embeddings,
            &a.split("test").unwrap().embeddings,
        ] {
            for r in m.row_iter() {
                assert!((norm(r) - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(a.split("train").unwrap().len(), 640);
        assert_eq!(a.split("test").unwrap().len(), 1000);
        assert_eq!(a.temperature(), 0.05);
        assert_ne!(a, generate(&SynthSpec { seed: 5, ..spec }).unwrap());
    }

    #[test]
    fn aligned_noiseless_bundle_is_solved() {
        let spec = SynthSpec {
            shift: 0.0,
            sample_noise: 0.0,
            ..SynthSpec::default()
        };
        let b = generate(&spec).unwrap();
        assert_eq!(zero_shot(&b), 1.0);
        let truth = true_directions(&spec).unwrap();
        for c in 0..spec.num_classes {
            assert!((dot(b.base.row(c), truth.row(c)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mild_noise_stays_accurate() {
        let mut good = 0;
        let trials = 20;
        for seed in 0..trials {
            let b = generate(&SynthSpec {
                num_classes: 10,
                dim: 64,
                test_per_class: 100,
                shift: 0.0,
                sample_noise: 0.1,
                seed,
                ..SynthSpec::default()
            })
            .unwrap();
            if zero_shot(&b) > 0.95 {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.95 * trials as f64, "{good}/{trials}");
    }

    #[test]
    fn accuracy_falls_with_shift() {
        let shifts = [0.1, 0.2, 0.4, 0.8, 1.6];
        let means: Vec<f64> = shifts
            .iter()
            .map(|&shift| {
                (0..5)
                    .map(|seed| {
                        zero_shot(
                            &generate(&SynthSpec {
                                shift,
                                seed,
                                ..SynthSpec::default()
                            })
                            .unwrap(),
                        )
                    })
                    .sum::<f64>()
                    / 5.0
            })
            .collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    }

    #[test]
    fn ladder_shares_images() {
        let spec = SynthSpec::default();
        let single = difficulty_ladder(
            &SynthSpec {
                shift: 0.0,
                ..spec.clone()
            },
            &[0.0],
        )
        .unwrap();
        assert_eq!(
            single[0],
            generate(&SynthSpec {
                shift: 0.0,
                ..spec.clone()
            })
            .unwrap()
        );

        let ladder = difficulty_ladder(&spec, &[0.1, 0.4]).unwrap();
        assert_eq!(ladder[0].splits, ladder[1].splits);
        assert_ne!(ladder[0].base, ladder[1].base);

        assert!(difficulty_ladder(&spec, &[0.4, 0.1]).is_err());
        assert!(difficulty_ladder(&spec, &[-0.1, 0.1]).is_err());
        assert!(difficulty_ladder(&spec, &[0.2, 0.2]).is_err());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec {
                num_classes: 1,
                ..SynthSpec::default()
            },
            SynthSpec {
                test_per_class: 0,
                ..SynthSpec::default()
            },
            SynthSpec {
                shift: -1.0,
                ..SynthSpec::default()
            },
            SynthSpec {
                temperature: 0.0,
                ..SynthSpec::default()
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}
