//! Mean cross-entropy over cosine-softmax probabilities and its closed-form
//! gradients with respect to each tunable parameter set.
//!
//! Forward chain for a batch `z` (N×D) with labels `y`:
//!
//! ```text
//! t' = build(t, spec)            ûₖ = t'ₖ/‖t'ₖ‖
//! z'ᵢ = zᵢ + α·r (image side)     ẑᵢ = z'ᵢ/‖z'ᵢ‖
//! sᵢₖ = ẑᵢ·ûₖ / τ                 pᵢ = softmax(sᵢ)
//! L = −(1/N) Σᵢ ln pᵢ,yᵢ
//! ```
//!
//! Backward: `∂L/∂sᵢₖ = (pᵢₖ − [k = yᵢ])/N`, then through the dot product and
//! the row normalization `∂(v/‖v‖)/∂v = (I − v̂v̂ᵀ)/‖v‖`.

use std::collections::BTreeMap;

use crate::classifier::{
    adapter_activation, adapter_hidden_pre, build_target_classifier, param, softmax_unit,
    unit_rows, AdapterKind, AdapterWeights, Construction, TargetClassifierSpec,
};
use crate::embedding_io::{EmbeddingMatrix, LabeledEmbeddings};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Smallest probability fed to the logarithm.
pub const LOG_CLAMP: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    /// One entry per tunable parameter set, shaped like the parameter.
    pub grads: BTreeMap<&'static str, Matrix>,
}

pub fn cross_entropy_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::DimensionMismatch {
            what: "label count".into(),
            expected: probs.rows(),
            found: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let k = probs.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                row: i,
                label: y,
                num_classes: k,
            });
        }
        total -= probs.get(i, y).max(LOG_CLAMP).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of `f(v/‖v‖)` w.r.t. `v`, given the gradient `g` w.r.t. the unit vector.
#[inline]
fn through_normalization(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(unit, g);
    unit.iter()
        .zip(g)
        .map(|(u, gi)| (gi - u * proj) / norm)
        .collect()
}

fn check_finite(name: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(name, "non-finite gradient"))
    }
}

pub fn loss_and_grads(
    batch: &LabeledEmbeddings,
    base: &EmbeddingMatrix,
    spec: &TargetClassifierSpec,
    tau: f64,
) -> Result<LossAndGrads> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let k = base.rows();
    let d = base.dim();
    let n = batch.len();
    if batch.embeddings.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "batch embeddings".into(),
            expected: d,
            found: batch.embeddings.dim(),
        });
    }

    // Forward.
    let t_prime = build_target_classifier(base, spec)?;
    let (units, t_norms) = unit_rows(&t_prime, "target classifier")
        .map_err(|e| Error::numerical("target classifier", e.to_string()))?;
    let z_prime = spec.transform_images(batch.embeddings.as_matrix())?;
    let (z_hat, z_norms) = unit_rows(&z_prime, "image embeddings")
        .map_err(|e| Error::numerical("image embeddings", e.to_string()))?;

    let mut probs = Matrix::zeros(n, k);
    for i in 0..n {
        probs
            .row_mut(i)
            .copy_from_slice(&softmax_unit(z_hat.row(i), &units, tau));
    }
    let loss = cross_entropy_loss(&probs, &batch.labels)?;
    if !loss.is_finite() {
        return Err(Error::numerical("loss", format!("loss is {loss}")));
    }

    // dL/dlogits, folded with 1/τ so it is dL/d(cosine).
    let mut g_cos = probs;
    let scale = 1.0 / (n as f64 * tau);
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = g_cos.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    let mut grads = BTreeMap::new();

    // Text side: only if the construction has tunable parameters.
    let text_tunable = !matches!(spec.construction, Construction::Base);
    let mut d_tprime = Matrix::zeros(k, d);
    if text_tunable {
        let d_units = g_cos.t_matmul(&z_hat)?;
        for (c, &t_norm) in t_norms.iter().enumerate() {
            let g = through_normalization(units.row(c), t_norm, d_units.row(c));
            d_tprime.row_mut(c).copy_from_slice(&g);
        }
    }

    // Image side.
    let mut d_image_alpha = 0.0;
    if let Some(img) = &spec.image_side {
        let alpha = spec.image_alpha().unwrap_or(0.0);
        let d_zhat = g_cos.matmul(&units)?;
        let mut sum = vec![0.0; d];
        for (i, &z_norm) in z_norms.iter().enumerate() {
            let g = through_normalization(z_hat.row(i), z_norm, d_zhat.row(i));
            for (s, gi) in sum.iter_mut().zip(&g) {
                *s += gi;
            }
        }
        d_image_alpha = dot(&img.values, &sum);
        let gr = Matrix::new(1, d, sum.iter().map(|s| alpha * s).collect())?;
        check_finite(param::IMAGE_RESIDUAL, &gr)?;
        grads.insert(param::IMAGE_RESIDUAL, gr);
        let shares = matches!(spec.construction, Construction::TaskRes(_));
        if img.alpha.is_learnable() && !shares {
            let g = Matrix::new(
                1,
                1,
                vec![d_image_alpha * spec.image_alpha_raw_derivative()],
            )?;
            check_finite(param::IMAGE_ALPHA_RAW, &g)?;
            grads.insert(param::IMAGE_ALPHA_RAW, g);
        }
    }

    match &spec.construction {
        Construction::Base => {}
        Construction::TaskRes(r) => {
            let a = r.alpha.value();
            let mut gx = d_tprime.clone();
            for v in gx.data_mut() {
                *v *= a;
            }
            check_finite(param::RESIDUAL, &gx)?;
            grads.insert(param::RESIDUAL, gx);
            if r.alpha.is_learnable() {
                let mut d_alpha = dot(r.values.data(), d_tprime.data());
                if spec.image_side.is_some() {
                    d_alpha += d_image_alpha;
                }
                let g = Matrix::new(1, 1, vec![d_alpha * r.alpha.raw_derivative()])?;
                check_finite(param::ALPHA_RAW, &g)?;
                grads.insert(param::ALPHA_RAW, g);
            }
        }
        Construction::DirectAdapter(w) => {
            adapter_grads(base.as_matrix(), w, &d_tprime, 1.0, &mut grads)?
        }
        Construction::AdapterStyle(w) => {
            adapter_grads(base.as_matrix(), w, &d_tprime, w.alpha, &mut grads)?
        }
        Construction::Projection(_) => {
            let gp = base.as_matrix().t_matmul(&d_tprime)?;
            check_finite(param::PROJECTION, &gp)?;
            grads.insert(param::PROJECTION, gp);
        }
    }

    Ok(LossAndGrads { loss, grads })
}

/// Backprop through `φ(t) = act(t·W₁ + b₁)·W₂ + b₂`, given `∂L/∂t'` and the
/// factor multiplying `φ` in `t'`.
fn adapter_grads(
    t: &Matrix,
    w: &AdapterWeights,
    d_tprime: &Matrix,
    factor: f64,
    grads: &mut BTreeMap<&'static str, Matrix>,
) -> Result<()> {
    let pre = adapter_hidden_pre(t, w)?;
    let hidden = adapter_activation(w.kind, &pre);

    let mut d_phi = d_tprime.clone();
    for v in d_phi.data_mut() {
        *v *= factor;
    }

    let gw2 = hidden.t_matmul(&d_phi)?;
    let mut d_hidden = d_phi.matmul_t(&w.w2)?;
    if w.kind == AdapterKind::Nonlinear {
        for (g, p) in d_hidden.data_mut().iter_mut().zip(pre.data()) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
    }
    let gw1 = t.t_matmul(&d_hidden)?;

    check_finite(param::ADAPTER_W1, &gw1)?;
    check_finite(param::ADAPTER_W2, &gw2)?;
    grads.insert(param::ADAPTER_W1, gw1);
    grads.insert(param::ADAPTER_W2, gw2);

    if w.bias1.is_some() {
        let gb1 = column_sums(&d_hidden);
        check_finite(param::ADAPTER_B1, &gb1)?;
        grads.insert(param::ADAPTER_B1, gb1);
    }
    if w.bias2.is_some() {
        let gb2 = column_sums(&d_phi);
        check_finite(param::ADAPTER_B2, &gb2)?;
        grads.insert(param::ADAPTER_B2, gb2);
    }
    Ok(())
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for row in m.row_iter() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{
        predict_probs, AdapterWeights, Alpha, EnhancedBaseProjection, ImageResidual, TaskResidual,
    };
    use crate::embedding_io::l2_normalize;
    use crate::rng::SplitMix64;

    fn random(rows: usize, cols: usize, scale: f64, g: &mut SplitMix64) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| scale * g.gaussian()).collect(),
        )
        .unwrap()
    }

    /// Loss via the public forward path only: per-row predict_probs then
    /// cross-entropy.
    fn forward_loss(
        batch: &LabeledEmbeddings,
        base: &EmbeddingMatrix,
        spec: &TargetClassifierSpec,
        tau: f64,
    ) -> f64 {
        let t = build_target_classifier(base, spec).unwrap();
        let z = spec.transform_images(batch.embeddings.as_matrix()).unwrap();
        let rows: Vec<Vec<f64>> = z
            .row_iter()
            .map(|r| predict_probs(r, &t, tau).unwrap())
            .collect();
        cross_entropy_loss(&Matrix::from_rows(&rows).unwrap(), &batch.labels).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let p = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(cross_entropy_loss(&p, &[0]).unwrap(), 0.0);
        let u = Matrix::from_rows(&[[0.25; 4], [0.25; 4]]).unwrap();
        assert!((cross_entropy_loss(&u, &[3, 1]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
        assert!(cross_entropy_loss(&u, &[4, 0]).is_err());
        // Clamp keeps a zero probability finite.
        assert!(cross_entropy_loss(&p, &[1]).unwrap().is_finite());

        let mut g = SplitMix64::new(2);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| g.uniform() + 0.01).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let labels = [2, 0, 3];
        let mut want = 0.0;
        for i in 0..3 {
            want += -rows[i][labels[i]].ln();
        }
        want /= 3.0;
        let got = cross_entropy_loss(&Matrix::from_rows(&rows).unwrap(), &labels).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_at_perfect_fit() {
        let base = EmbeddingMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let labels = vec![0, 1, 2, 1];
        let z = base.select(&labels).unwrap();
        let batch = LabeledEmbeddings::new(z, labels, 3).unwrap();
        let spec = TargetClassifierSpec::new(Construction::TaskRes(TaskResidual::zeros(
            3,
            3,
            Alpha::Fixed(0.5),
        )));
        let out = loss_and_grads(&batch, &base, &spec, 0.01).unwrap();
        assert!(out.loss < 1e-40);
        assert!(out.grads[param::RESIDUAL]
            .data()
            .iter()
            .all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn frozen_parameters_have_no_gradient() {
        let mut g = SplitMix64::new(8);
        let base =
            l2_normalize(&EmbeddingMatrix::try_from(random(3, 4, 1.0, &mut g)).unwrap()).unwrap();
        let z = EmbeddingMatrix::try_from(random(5, 4, 1.0, &mut g)).unwrap();
        let batch = LabeledEmbeddings::new(z, vec![0, 1, 2, 0, 1], 3).unwrap();
        let out = loss_and_grads(&batch, &base, &TargetClassifierSpec::base(), 0.1).unwrap();
        assert!(out.grads.is_empty());
        let spec = TargetClassifierSpec::new(Construction::TaskRes(TaskResidual::zeros(
            3,
            4,
            Alpha::Fixed(0.5),
        )));
        let out = loss_and_grads(&batch, &base, &spec, 0.1).unwrap();
        assert_eq!(
            out.grads.keys().copied().collect::<Vec<_>>(),
            vec![param::RESIDUAL]
        );
        let w = AdapterWeights::init(AdapterKind::Nonlinear, 4, 2, 0.5, 1).unwrap();
        let out = loss_and_grads(
            &batch,
            &base,
            &TargetClassifierSpec::new(Construction::AdapterStyle(w)),
            0.1,
        )
        .unwrap();
        assert!(!out.grads.contains_key(param::ADAPTER_B1));
        assert!(!out.grads.contains_key(param::RESIDUAL));
    }

    #[test]
    fn residual_gradient_vanishes_at_zero_alpha() {
        let mut g = SplitMix64::new(9);
        let base =
            l2_normalize(&EmbeddingMatrix::try_from(random(3, 5, 1.0, &mut g)).unwrap()).unwrap();
        let z = EmbeddingMatrix::try_from(random(4, 5, 1.0, &mut g)).unwrap();
        let batch = LabeledEmbeddings::new(z, vec![0, 1, 2, 2], 3).unwrap();
        let spec = TargetClassifierSpec::new(Construction::TaskRes(TaskResidual {
            values: random(3, 5, 0.3, &mut g),
            alpha: Alpha::Fixed(0.0),
        }));
        let out = loss_and_grads(&batch, &base, &spec, 0.05).unwrap();
        assert!(out.grads[param::RESIDUAL].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_invariant_to_batch_order() {
        let mut g = SplitMix64::new(10);
        let base =
            l2_normalize(&EmbeddingMatrix::try_from(random(3, 5, 1.0, &mut g)).unwrap()).unwrap();
        let z = EmbeddingMatrix::try_from(random(6, 5, 1.0, &mut g)).unwrap();
        let batch = LabeledEmbeddings::new(z, vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let perm = [5, 3, 1, 0, 2, 4];
        let shuffled = batch.select(&perm).unwrap();
        let spec = TargetClassifierSpec::new(Construction::TaskRes(TaskResidual {
            values: random(3, 5, 0.3, &mut g),
            alpha: Alpha::Fixed(0.5),
        }));
        let a = loss_and_grads(&batch, &base, &spec, 0.05).unwrap();
        let b = loss_and_grads(&shuffled, &base, &spec, 0.05).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-14);
        for (x, y) in a.grads[param::RESIDUAL]
            .data()
            .iter()
            .zip(b.grads[param::RESIDUAL].data())
        {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 123.456).collect();
        let a = crate::classifier::softmax(&logits);
        let b = crate::classifier::softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let huge: Vec<f64> = logits.iter().map(|l| l * 1e4).collect();
        assert!(crate::classifier::softmax(&huge)
            .iter()
            .all(|v| v.is_finite()));
    }

    /// Every configuration the trainer tunes, with random non-trivial values.
    pub(crate) fn configurations(
        k: usize,
        d: usize,
        base: &Matrix,
        g: &mut SplitMix64,
    ) -> Vec<(&'static str, TargetClassifierSpec)> {
        let residual = |g: &mut SplitMix64, alpha| TaskResidual {
            values: random(k, d, 0.3, g),
            alpha,
        };
        let image = |g: &mut SplitMix64, alpha| ImageResidual {
            values: (0..d).map(|_| 0.3 * g.gaussian()).collect(),
            alpha,
        };
        let adapter = |g: &mut SplitMix64, kind| {
            // Redraw until every row keeps a live ReLU unit and no
            // pre-activation sits near the kink.
            let mut w = loop {
                let w = AdapterWeights::init(kind, d, 4, 0.5, g.next_u64()).unwrap();
                let pre = adapter_hidden_pre(base, &w).unwrap();
                let rows_live = (0..pre.rows()).all(|r| pre.row(r).iter().any(|&v| v > 0.05));
                if rows_live && pre.data().iter().all(|v| v.abs() > 1e-3) {
                    break w;
                }
            };
            if let Some(b) = &mut w.bias1 {
                b.iter_mut().for_each(|v| *v = 0.1 * g.gaussian());
            }
            if let Some(b) = &mut w.bias2 {
                b.iter_mut().for_each(|v| *v = 0.1 * g.gaussian());
            }
            w
        };
        let mut p = Matrix::identity(d);
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.2 * g.gaussian());
        let learnable_raw = 0.3 + 0.5 * g.gaussian();
        vec![
            (
                "taskres-t",
                TargetClassifierSpec::new(Construction::TaskRes(residual(g, Alpha::Fixed(0.5)))),
            ),
            (
                "learnable-alpha",
                TargetClassifierSpec::new(Construction::TaskRes(residual(
                    g,
                    Alpha::Learnable { raw: learnable_raw },
                ))),
            ),
            (
                "adapter-style",
                TargetClassifierSpec::new(Construction::AdapterStyle(adapter(
                    g,
                    AdapterKind::Nonlinear,
                ))),
            ),
            (
                "adapter-style-linear-bias",
                TargetClassifierSpec::new(Construction::AdapterStyle(adapter(
                    g,
                    AdapterKind::LinearBias,
                ))),
            ),
            (
                "direct-adapter",
                TargetClassifierSpec::new(Construction::DirectAdapter(adapter(
                    g,
                    AdapterKind::Nonlinear,
                ))),
            ),
            (
                "direct-adapter-linear",
                TargetClassifierSpec::new(Construction::DirectAdapter(adapter(
                    g,
                    AdapterKind::Linear,
                ))),
            ),
            (
                "projection",
                TargetClassifierSpec::new(Construction::Projection(EnhancedBaseProjection { p })),
            ),
            (
                "taskres-i",
                TargetClassifierSpec::base().with_image_residual(image(g, Alpha::Fixed(0.7))),
            ),
            (
                "taskres-i-learnable",
                TargetClassifierSpec::base()
                    .with_image_residual(image(g, Alpha::Learnable { raw: 0.4 })),
            ),
            (
                "taskres-it",
                TargetClassifierSpec::new(Construction::TaskRes(residual(g, Alpha::Fixed(0.5))))
                    .with_image_residual(image(g, Alpha::Fixed(0.5))),
            ),
            (
                "taskres-it-learnable",
                TargetClassifierSpec::new(Construction::TaskRes(residual(
                    g,
                    Alpha::Learnable { raw: 0.2 },
                )))
                .with_image_residual(image(g, Alpha::Fixed(0.5))),
            ),
        ]
    }

    #[test]
    fn gradients_match_central_differences() {
        let (k, d, n, tau, h) = (3, 5, 4, 0.5, 1e-6);
        for seed in 0..20u64 {
            let mut g = SplitMix64::new(1000 + seed);
            let base = l2_normalize(&EmbeddingMatrix::try_from(random(k, d, 1.0, &mut g)).unwrap())
                .unwrap();
            let z = EmbeddingMatrix::try_from(random(n, d, 1.0, &mut g)).unwrap();
            let labels = (0..n).map(|_| g.below(k)).collect();
            let batch = LabeledEmbeddings::new(z, labels, k).unwrap();
            for (name, spec) in configurations(k, d, base.as_matrix(), &mut g) {
                let analytic = loss_and_grads(&batch, &base, &spec, tau)
                    .unwrap_or_else(|e| panic!("seed {seed} {name}: {e}"));
                let names: Vec<&str> = spec.tunable().iter().map(|p| p.name).collect();
                assert_eq!(names.len(), analytic.grads.len(), "{name}");
                for (pi, pname) in names.iter().enumerate() {
                    let grad = &analytic.grads[pname];
                    for j in 0..grad.data().len() {
                        let eval = |delta: f64| {
                            let mut s = spec.clone();
                            s.tunable_mut()[pi].values[j] += delta;
                            forward_loss(&batch, &base, &s, tau)
                        };
                        let fd = (eval(h) - eval(-h)) / (2.0 * h);
                        let a = grad.data()[j];
                        // An f64 forward pass carries roundoff near ε·L/h ≈ 1e-10
                        // in the difference quotient; the strict bound for small
                        // entries is checked by the double-double oracle in the
                        // acceptance suite.
                        let ok =
                            (a - fd).abs() < 1e-9 || (a - fd).abs() / a.abs().max(fd.abs()) < 1e-4;
                        assert!(ok, "seed {seed} {name} {pname}[{j}]: analytic {a} fd {fd}");
                    }
                }
            }
        }
    }
}
