//! Few-shot episodes and the training procedure.
//!
//! Per seed: sample an episode, optionally tune a text-side projection to get
//! an enhanced base (then frozen), initialize the variant's parameters
//! (residuals at zero), and run Adam over seeded-shuffled mini-batches with
//! the warmup + cosine schedule. The reported accuracy is measured on the
//! test split after the last epoch, with parameters rounded to the `f32`
//! precision they are exported at.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{boundary_shift, residual_magnitude, BoundaryShift, MagnitudeStats};
use crate::classifier::{
    AdapterKind, AdapterWeights, Alpha, Construction, EnhancedBaseProjection, ImageResidual,
    TargetClassifierSpec, TaskResidual, DEFAULT_ALPHA,
};
use crate::embedding_io::{l2_normalize, Bundle, EmbeddingMatrix, LabeledEmbeddings};
use crate::error::{Error, Result};
use crate::gradients::loss_and_grads;
use crate::optimizer::{AdamState, LrSchedule};
use crate::rng::{derive, tag, SplitMix64};

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_LR: f64 = 2e-3;
pub const DEFAULT_ENHANCED_EPOCHS: usize = 50;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// Default epoch count for a shot setting: 100 up to 4 shots, 200 above.
pub fn default_epochs(shots: usize) -> usize {
    if shots <= 4 {
        100
    } else {
        200
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Zero-shot base classifier, nothing tuned.
    Base,
    /// Residual on the text classifier.
    TaskresT,
    /// Residual on the image embeddings.
    TaskresI,
    /// Both residuals, one shared α.
    TaskresIt,
    AdapterStyle,
    DirectAdapter,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::TaskresT,
        Variant::TaskresI,
        Variant::TaskresIt,
        Variant::AdapterStyle,
        Variant::DirectAdapter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::TaskresT => "taskres-t",
            Variant::TaskresI => "taskres-i",
            Variant::TaskresIt => "taskres-it",
            Variant::AdapterStyle => "adapter-style",
            Variant::DirectAdapter => "direct-adapter",
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(
            self,
            Variant::TaskresT | Variant::TaskresI | Variant::TaskresIt
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Scaling factor setting: a fixed number or `"learnable"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Fixed(f64),
    Learnable(LearnableTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnableTag {
    Learnable,
}

impl AlphaSetting {
    pub const LEARNABLE: AlphaSetting = AlphaSetting::Learnable(LearnableTag::Learnable);

    pub fn initial(&self) -> Alpha {
        match *self {
            AlphaSetting::Fixed(a) => Alpha::Fixed(a),
            AlphaSetting::Learnable(_) => Alpha::learnable(),
        }
    }
}

impl Default for AlphaSetting {
    fn default() -> Self {
        AlphaSetting::Fixed(DEFAULT_ALPHA)
    }
}

impl fmt::Display for AlphaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaSetting::Fixed(a) => write!(f, "{a}"),
            AlphaSetting::Learnable(_) => f.write_str("learnable"),
        }
    }
}

impl FromStr for AlphaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("learnable") || s.eq_ignore_ascii_case("learned") {
            return Ok(AlphaSetting::LEARNABLE);
        }
        let a: f64 = s.parse().map_err(|_| {
            Error::invalid(format!("alpha must be a number or 'learnable', got {s:?}"))
        })?;
        if !a.is_finite() {
            return Err(Error::invalid("alpha must be finite"));
        }
        Ok(AlphaSetting::Fixed(a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub shots: usize,
    /// `None` picks [`default_epochs`] for the shot count.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub alpha: AlphaSetting,
    pub adapter_kind: AdapterKind,
    /// `None` means `D/4` (at least 1).
    pub adapter_hidden: Option<usize>,
    pub enhanced_base: bool,
    pub enhanced_epochs: usize,
    pub seeds: Vec<u64>,
    pub train_split: String,
    pub test_split: String,
    /// Seeds trained concurrently.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TaskresT,
            shots: 16,
            epochs: None,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_LR,
            alpha: AlphaSetting::default(),
            adapter_kind: AdapterKind::default(),
            adapter_hidden: None,
            enhanced_base: false,
            enhanced_epochs: DEFAULT_ENHANCED_EPOCHS,
            seeds: DEFAULT_SEEDS.to_vec(),
            train_split: "train".into(),
            test_split: "test".into(),
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| default_epochs(self.shots))
    }

    pub fn adapter_hidden(&self, dim: usize) -> usize {
        self.adapter_hidden.unwrap_or((dim / 4).max(1))
    }

    /// Copy with every defaulted field made explicit.
    pub fn resolved(&self, dim: usize) -> Self {
        Self {
            epochs: Some(self.epochs()),
            adapter_hidden: Some(self.adapter_hidden(dim)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots < 1 {
            return Err(Error::invalid("shots must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if let AlphaSetting::Fixed(a) = self.alpha {
            if !a.is_finite() {
                return Err(Error::invalid("alpha must be finite"));
            }
        }
        if matches!(self.alpha, AlphaSetting::Learnable(_))
            && matches!(self.variant, Variant::AdapterStyle | Variant::DirectAdapter)
        {
            return Err(Error::invalid(
                "learnable alpha applies to residual variants only",
            ));
        }
        if self.adapter_hidden == Some(0) {
            return Err(Error::invalid("adapter hidden width must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.jobs < 1 {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotEpisode {
    pub shots_per_class: usize,
    pub seed: u64,
    /// Pool row indices, grouped by class, ascending within a class.
    pub indices: Vec<usize>,
    pub selected: LabeledEmbeddings,
}

/// Draws `shots` rows per class without replacement.
pub fn sample_episode(
    pool: &LabeledEmbeddings,
    num_classes: usize,
    shots: usize,
    seed: u64,
) -> Result<FewShotEpisode> {
    if shots < 1 {
        return Err(Error::invalid("shots must be at least 1"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in pool.labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                row: i,
                label: y,
                num_classes,
            });
        }
        by_class[y].push(i);
    }
    let mut rng = SplitMix64::stream(seed, tag::EPISODE);
    let mut indices = Vec::with_capacity(num_classes * shots);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < shots {
            return Err(Error::InsufficientExamples {
                class,
                available: members.len(),
                requested: shots,
            });
        }
        let n = members.len();
        for i in 0..shots {
            let j = i + rng.below(n - i);
            members.swap(i, j);
        }
        let mut chosen = members[..shots].to_vec();
        chosen.sort_unstable();
        indices.extend(chosen);
    }
    let selected = pool.select(&indices)?;
    Ok(FewShotEpisode {
        shots_per_class: shots,
        seed,
        indices,
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Runs Adam on `spec`'s tunable parameters for `epochs` epochs.
#[allow(clippy::too_many_arguments)]
fn optimize(
    base: &EmbeddingMatrix,
    data: &LabeledEmbeddings,
    spec: &mut TargetClassifierSpec,
    tau: f64,
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    shuffle_seed: u64,
) -> Result<Vec<EpochLoss>> {
    if epochs == 0 || spec.tunable().is_empty() {
        return Ok(Vec::new());
    }
    let schedule = LrSchedule::new(base_lr, epochs);
    let mut adam = AdamState::new();
    let n = data.len();
    let batch_size = batch_size.min(n).max(1);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(derive(shuffle_seed, epoch as u64)).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = data.select(chunk)?;
            let out = loss_and_grads(&batch, base, spec, tau)?;
            total += out.loss * chunk.len() as f64;
            adam.apply(&mut spec.tunable_mut(), &out.grads, lr)?;
        }
        let mean_loss = total / n as f64;
        if !mean_loss.is_finite() {
            return Err(Error::numerical(
                "loss",
                format!("epoch {epoch} mean loss is {mean_loss}"),
            ));
        }
        curve.push(EpochLoss {
            epoch,
            mean_loss,
            lr,
        });
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedBase {
    pub projection: EnhancedBaseProjection,
    /// `normalize(base · P)`, frozen for the residual stage.
    pub base: EmbeddingMatrix,
    pub loss_curve: Vec<EpochLoss>,
}

/// Applies a tuned projection: `normalize(base · P)`.
pub fn project_base(
    base: &EmbeddingMatrix,
    projection: &EnhancedBaseProjection,
) -> Result<EmbeddingMatrix> {
    let spec = TargetClassifierSpec::new(Construction::Projection(projection.clone()));
    let projected = crate::classifier::build_target_classifier(base, &spec)?;
    l2_normalize(&EmbeddingMatrix::try_from(projected)?)
}

/// Tunes a D×D projection of the base classifier on the episode, starting
/// from identity, with the same loss, optimizer and schedule as the main stage.
pub fn train_enhanced_base(
    base: &EmbeddingMatrix,
    episode: &FewShotEpisode,
    config: &TrainConfig,
    tau: f64,
) -> Result<EnhancedBase> {
    let mut spec = TargetClassifierSpec::new(Construction::Projection(
        EnhancedBaseProjection::identity(base.dim()),
    ));
    let loss_curve = optimize(
        base,
        &episode.selected,
        &mut spec,
        tau,
        config.enhanced_epochs,
        config.batch_size,
        config.base_lr,
        derive(episode.seed, tag::ENHANCE_SHUFFLE),
    )?;
    spec.round_to_f32();
    let Construction::Projection(projection) = spec.construction else {
        unreachable!("projection stage keeps its construction")
    };
    let base = project_base(base, &projection)?;
    Ok(EnhancedBase {
        projection,
        base,
        loss_curve,
    })
}

/// Fresh parameters for a variant: residuals at zero, adapters seeded.
pub fn init_spec(
    config: &TrainConfig,
    num_classes: usize,
    dim: usize,
    seed: u64,
) -> Result<TargetClassifierSpec> {
    let alpha = config.alpha.initial();
    let adapter_alpha = match config.alpha {
        AlphaSetting::Fixed(a) => a,
        AlphaSetting::Learnable(_) => DEFAULT_ALPHA,
    };
    let adapter = || {
        AdapterWeights::init(
            config.adapter_kind,
            dim,
            config.adapter_hidden(dim),
            adapter_alpha,
            seed,
        )
    };
    Ok(match config.variant {
        Variant::Base => TargetClassifierSpec::base(),
        Variant::TaskresT => TargetClassifierSpec::new(Construction::TaskRes(TaskResidual::zeros(
            num_classes,
            dim,
            alpha,
        ))),
        Variant::TaskresI => {
            TargetClassifierSpec::base().with_image_residual(ImageResidual::zeros(dim, alpha))
        }
        Variant::TaskresIt => TargetClassifierSpec::new(Construction::TaskRes(
            TaskResidual::zeros(num_classes, dim, alpha),
        ))
        .with_image_residual(ImageResidual::zeros(dim, alpha)),
        Variant::AdapterStyle => TargetClassifierSpec::new(Construction::AdapterStyle(adapter()?)),
        Variant::DirectAdapter => {
            TargetClassifierSpec::new(Construction::DirectAdapter(adapter()?))
        }
    })
}

/// Fraction of rows whose predicted label matches.
pub fn evaluate(
    split: &LabeledEmbeddings,
    base: &EmbeddingMatrix,
    spec: &TargetClassifierSpec,
    tau: f64,
) -> Result<f64> {
    let preds = spec.predict(base, split.embeddings.as_matrix(), tau)?;
    accuracy(&preds, &split.labels)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction count".into(),
            expected: labels.len(),
            found: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy per class; `None` for classes absent from `labels`.
pub fn per_class_accuracy(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y < num_classes {
            seen[y] += 1;
            if p == y {
                hit[y] += 1;
            }
        }
    }
    hit.iter()
        .zip(&seen)
        .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
        .collect()
}

/// Learned parameters of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub seed: u64,
    pub spec: TargetClassifierSpec,
    pub projection: Option<EnhancedBaseProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedStageReport {
    pub epochs: usize,
    pub base_lr: f64,
    pub loss_curve: Vec<EpochLoss>,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub test_accuracy: f64,
    /// Regular base classifier on the test split.
    pub zero_shot_accuracy: f64,
    pub episode_size: usize,
    pub final_loss: Option<f64>,
    pub loss_curve: Vec<EpochLoss>,
    pub magnitude: Option<MagnitudeStats>,
    pub learned_alpha: Option<f64>,
    /// Correctness flips relative to the zero-shot predictions.
    pub boundary: BoundaryShift,
    pub enhanced: Option<EnhancedStageReport>,
    #[serde(skip)]
    pub test_predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub num_classes: usize,
    pub dim: usize,
    pub temperature: f64,
    pub config: TrainConfig,
    pub seeds: Vec<SeedReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_zero_shot_accuracy: f64,
    /// Seed means of the residual magnitude statistics, when a residual was tuned.
    pub mean_magnitude: Option<f64>,
    pub median_magnitude: Option<f64>,
    /// What "magnitude" means in this report.
    pub magnitude_statistic: String,
    pub base_hash: String,
    pub duration_secs: f64,
    #[serde(skip)]
    pub models: Vec<TrainedModel>,
}

impl RunReport {
    pub fn learned_alpha_mean(&self) -> Option<f64> {
        let alphas: Vec<f64> = self.seeds.iter().filter_map(|s| s.learned_alpha).collect();
        (!alphas.is_empty()).then(|| mean(&alphas))
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn train_seed(
    bundle: &Bundle,
    config: &TrainConfig,
    seed: u64,
    zero_shot: &[usize],
) -> Result<(SeedReport, TrainedModel)> {
    let tau = bundle.temperature();
    let k = bundle.num_classes();
    let d = bundle.base.dim();
    let train_split = bundle.split(&config.train_split)?;
    let test = bundle.split(&config.test_split)?;
    let episode = sample_episode(train_split, k, config.shots, seed)?;

    let (base, projection, enhanced) = if config.enhanced_base {
        let eb = train_enhanced_base(&bundle.base, &episode, config, tau)?;
        let acc = evaluate(test, &eb.base, &TargetClassifierSpec::base(), tau)?;
        let report = EnhancedStageReport {
            epochs: config.enhanced_epochs,
            base_lr: config.base_lr,
            loss_curve: eb.loss_curve,
            test_accuracy: acc,
        };
        (eb.base, Some(eb.projection), Some(report))
    } else {
        (bundle.base.clone(), None, None)
    };

    let mut spec = init_spec(config, k, d, seed)?;
    let loss_curve = optimize(
        &base,
        &episode.selected,
        &mut spec,
        tau,
        config.epochs(),
        config.batch_size,
        config.base_lr,
        derive(seed, tag::SHUFFLE),
    )?;
    spec.round_to_f32();

    let preds = spec.predict(&base, test.embeddings.as_matrix(), tau)?;
    let test_accuracy = accuracy(&preds, &test.labels)?;
    let boundary = boundary_shift(zero_shot, &preds, &test.labels)?;
    let magnitude = match (&spec.construction, &spec.image_side) {
        (Construction::TaskRes(r), _) => Some(residual_magnitude(r)),
        (_, Some(img)) => Some(MagnitudeStats::of_values(&img.values, 1)),
        _ => None,
    };
    let learned_alpha = match (&spec.construction, &spec.image_side) {
        (Construction::TaskRes(r), _) if r.alpha.is_learnable() => Some(r.alpha.value()),
        (_, Some(img)) if img.alpha.is_learnable() => Some(img.alpha.value()),
        _ => None,
    };

    let report = SeedReport {
        seed,
        test_accuracy,
        zero_shot_accuracy: accuracy(zero_shot, &test.labels)?,
        episode_size: episode.selected.len(),
        final_loss: loss_curve.last().map(|e| e.mean_loss),
        loss_curve,
        magnitude,
        learned_alpha,
        boundary,
        enhanced,
        test_predictions: preds,
    };
    Ok((
        report,
        TrainedModel {
            seed,
            spec,
            projection,
        },
    ))
}

/// Trains the configured variant once per seed and aggregates test accuracy.
pub fn train(bundle: &Bundle, config: &TrainConfig) -> Result<RunReport> {
    let started = Instant::now();
    config.validate()?;
    let bundle = bundle.normalized()?;
    let tau = bundle.temperature();
    let test = bundle.split(&config.test_split)?;
    bundle.split(&config.train_split)?;
    let base_hash = bundle.base.content_hash();

    let zero_shot =
        TargetClassifierSpec::base().predict(&bundle.base, test.embeddings.as_matrix(), tau)?;

    let run_one = |&seed: &u64| {
        train_seed(&bundle, config, seed, &zero_shot).map_err(|e| match e {
            Error::Numerical { what, detail } => Error::Numerical {
                what: format!("seed {seed}: {what}"),
                detail,
            },
            other => other,
        })
    };
    let outcomes: Vec<(SeedReport, TrainedModel)> = if config.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| config.seeds.par_iter().map(run_one).collect::<Result<_>>())?
    } else {
        config.seeds.iter().map(run_one).collect::<Result<_>>()?
    };

    if bundle.base.content_hash() != base_hash {
        return Err(Error::numerical(
            "base classifier",
            "modified during training",
        ));
    }

    let (seeds, models): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let accs: Vec<f64> = seeds.iter().map(|s| s.test_accuracy).collect();
    let zs: Vec<f64> = seeds.iter().map(|s| s.zero_shot_accuracy).collect();
    let mags: Vec<&MagnitudeStats> = seeds.iter().filter_map(|s| s.magnitude.as_ref()).collect();
    let (mean_magnitude, median_magnitude) = if mags.is_empty() {
        (None, None)
    } else {
        (
            Some(mean(&mags.iter().map(|m| m.mean).collect::<Vec<_>>())),
            Some(mean(&mags.iter().map(|m| m.median).collect::<Vec<_>>())),
        )
    };

    Ok(RunReport {
        variant: config.variant,
        num_classes: bundle.num_classes(),
        dim: bundle.base.dim(),
        temperature: tau,
        config: config.resolved(bundle.base.dim()),
        mean_accuracy: mean(&accs),
        std_accuracy: sample_std(&accs),
        mean_zero_shot_accuracy: mean(&zs),
        mean_magnitude,
        median_magnitude,
        magnitude_statistic: "mean and median of absolute residual entries".into(),
        base_hash,
        duration_secs: started.elapsed().as_secs_f64(),
        seeds,
        models,
    })
}
