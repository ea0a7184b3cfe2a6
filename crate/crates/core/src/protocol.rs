//! Multi-step incremental training, the baselines, and mIoU evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{labels_through, relabel_for_step, split_incremental, Scene, StepSpec};
use crate::distill::{
    make_batch, new_optimizer, supervised_step, DistillConfig, MixedSampler, PoolSample, Provenance,
};
use crate::error::{Error, Result};
use crate::inversion::{draw_targets, invert, FakeSample, InversionConfig, InversionFailure};
use crate::maps::{LabelMap, ScoreMap};
use crate::numcore::{AdamConfig, Tensor};
use crate::rng::stream;
use crate::segnet::{head_expand, noise_image, stack_images, ArchConfig, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Inverted fakes plus real data, distillation and merged labels.
    Hrhf,
    /// Fine-tuning on new labels only.
    Ft,
    /// Offline training on every class at once.
    Joint,
    /// As `Hrhf` with uniform noise in place of the fakes.
    NoiseReplay,
    /// As `Hrhf` with the distillation weight at zero.
    HrhfNoKd,
    /// As `Hrhf` without any replayed images.
    NoFake,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Hrhf,
        Method::Ft,
        Method::Joint,
        Method::NoiseReplay,
        Method::HrhfNoKd,
        Method::NoFake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Hrhf => "hrhf",
            Method::Ft => "ft",
            Method::Joint => "joint",
            Method::NoiseReplay => "noise_replay",
            Method::HrhfNoKd => "hrhf_no_kd",
            Method::NoFake => "no_fake",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?}")))
    }
}

/// Plain supervised training of a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            adam: AdamConfig::with_lr(1e-2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub arch: ArchConfig,
    pub initial: TrainConfig,
    pub incremental: DistillConfig,
    pub inversion: InversionConfig,
    /// Fake pool size as a multiple of the step's real sample count.
    pub fake_pool_factor: f64,
    /// Standard deviation of new head channels.
    pub head_sigma: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            arch: ArchConfig::default(),
            initial: TrainConfig::default(),
            incremental: DistillConfig::default(),
            inversion: InversionConfig::default(),
            fake_pool_factor: 2.0,
            head_sigma: 0.01,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial.batch == 0 {
            return Err(Error::Invalid("initial batch must be positive".into()));
        }
        if !(self.fake_pool_factor >= 0.0) || !(self.head_sigma >= 0.0) {
            return Err(Error::Invalid("fake_pool_factor and head_sigma must be >= 0".into()));
        }
        if self.arch.blocks == 0 || self.arch.width == 0 {
            return Err(Error::Invalid("architecture needs blocks and width".into()));
        }
        self.incremental.validate()?;
        self.inversion.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPlan {
    pub spec: StepSpec,
    pub method: Method,
    pub config: ProtocolConfig,
    pub seed: u64,
}

impl RunPlan {
    /// Hex SHA-256 of the plan's JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("plain data serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub step: usize,
    pub epoch: usize,
    pub kd: f64,
    pub seg: f64,
    pub total: f64,
}

/// Per-class IoU and grouped means after one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Indexed by model channel; `None` when the class never occurs in
    /// either prediction or ground truth.
    pub iou: Vec<Option<f64>>,
    pub old_miou: Option<f64>,
    pub new_miou: Option<f64>,
    pub all_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub method: Method,
    pub config_hash: String,
    pub seed: u64,
    pub history: Vec<StepMetrics>,
}

impl MetricsReport {
    pub fn last(&self) -> &StepMetrics {
        self.history.last().expect("at least one step")
    }

    /// Old-class mIoU after the last step, 0 when undefined.
    pub fn final_old(&self) -> f64 {
        self.last().old_miou.unwrap_or(0.0)
    }
}

/// Pixel confusion counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.pixels() != pred.pixels() {
            return Err(Error::Shape("prediction and ground truth differ in size".into()));
        }
        for p in 0..gt.pixels() {
            if gt.is_ignored(p) {
                continue;
            }
            let (g, q) = (gt.labels()[p] as usize, pred.labels()[p] as usize);
            if g >= self.classes || q >= self.classes {
                return Err(Error::Invalid(format!("label {g}/{q} outside {} classes", self.classes)));
            }
            self.counts[g * self.classes + q] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// `TP / (TP + FP + FN)` per class.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..self.classes).map(|j| self.get(k, j)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|j| self.get(j, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

fn group_mean(iou: &[Option<f64>], group: impl Iterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = group.filter_map(|k| iou.get(k).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores a model after `step` against complete ground truth; pixels of
/// classes not yet introduced are ignored. Old is the foreground of earlier
/// steps, new the classes of `step`, all is background plus every seen class.
pub fn evaluate(model: &ModelState, scenes: &[Scene], spec: &StepSpec, step: usize) -> Result<StepMetrics> {
    let classes = spec.channels_through(step);
    if model.classes() != classes {
        return Err(Error::Shape(format!(
            "model has {} channels, step {step} needs {classes}",
            model.classes()
        )));
    }
    let mut conf = Confusion::new(classes);
    for chunk in scenes.chunks(8) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let probs = model.forward_eval(&stack_images(&images)?)?;
        for (scene, map) in chunk.iter().zip(ScoreMap::split_batch(&probs)?) {
            conf.add(&labels_through(scene, spec, step)?, &map.argmax())?;
        }
    }
    let iou = conf.iou();
    let new = spec.new_channels(step);
    Ok(StepMetrics {
        step,
        old_miou: group_mean(&iou, 1..new.start),
        new_miou: group_mean(&iou, new),
        all_miou: group_mean(&iou, 0..classes),
        iou,
    })
}

/// Certain-background teacher map; with it label merge reproduces the given
/// labels and the distillation term carries no information.
fn background_map(classes: usize, height: usize, width: usize) -> ScoreMap {
    let hw = height * width;
    let mut data = vec![0.0; classes * hw];
    data[..hw].fill(1.0);
    ScoreMap::new(classes, height, width, data).expect("valid simplex")
}

fn teacher_maps(teacher: &ModelState, images: &[&Tensor]) -> Result<Vec<ScoreMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        out.extend(ScoreMap::split_batch(&teacher.forward_eval(&stack_images(chunk)?)?)?);
    }
    Ok(out)
}

/// Real pool for `step`, labelled with that step's classes only.
pub fn real_pool(scenes: &[&Scene], spec: &StepSpec, step: usize, teacher: Option<&ModelState>) -> Result<Vec<PoolSample>> {
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let maps = match teacher {
        Some(t) => teacher_maps(t, &images)?,
        None => scenes
            .iter()
            .map(|s| background_map(1, s.height, s.width))
            .collect(),
    };
    scenes
        .iter()
        .zip(maps)
        .map(|(s, teacher)| {
            Ok(PoolSample {
                image: s.image.clone(),
                new_labels: relabel_for_step(s, spec, step)?,
                teacher,
                provenance: Provenance::Real,
            })
        })
        .collect()
}

/// Fake pool from inverted images.
pub fn fake_pool_from(samples: &[FakeSample], student_classes: usize) -> Vec<PoolSample> {
    samples
        .iter()
        .map(|f| PoolSample {
            image: f.image.clone(),
            new_labels: LabelMap::background(student_classes, f.teacher_map.height(), f.teacher_map.width()),
            teacher: f.teacher_map.clone(),
            provenance: Provenance::Fake,
        })
        .collect()
}

/// Runs `epochs` passes over the real pool; an epoch is as many batches as
/// it takes to draw every real sample once.
pub fn train_pools(
    student: &mut ModelState,
    real: &[PoolSample],
    fake: &[PoolSample],
    cfg: &DistillConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<EpochLoss>> {
    if real.is_empty() {
        return Err(Error::Invalid(format!("step {step} has no training data")));
    }
    let mut rng = stream(seed, "batches", step as u64);
    let mut adam = new_optimizer(student, cfg);
    let mut sampler = MixedSampler::new(real.len(), fake.len());
    let per_epoch = real.len().div_ceil(sampler.real_per_batch(cfg));
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut kd, mut seg, mut total) = (0.0, 0.0, 0.0);
        for b in 0..per_epoch {
            let batch = make_batch(real, fake, &mut sampler, cfg, &mut rng)?;
            let l = supervised_step(student, &mut adam, &batch, cfg).map_err(|e| {
                Error::NonFinite(format!("step {step} epoch {epoch} batch {b}: {e}"))
            })?;
            kd += l.kd;
            seg += l.seg;
            total += l.total;
        }
        let n = per_epoch as f64;
        curve.push(EpochLoss {
            step,
            epoch,
            kd: kd / n,
            seg: seg / n,
            total: total / n,
        });
        log::debug!("step {step} epoch {epoch}: total {:.4}", total / n);
    }
    Ok(curve)
}

fn plain_config(t: &TrainConfig) -> DistillConfig {
    DistillConfig {
        lambda: 0.0,
        ratio: [1, 1],
        batch: t.batch,
        epochs: t.epochs,
        adam: t.adam,
        kd_scope: Default::default(),
    }
}

/// Supervised step-0 training on the first step's labels.
pub fn train_initial(plan: &RunPlan, scenes: &[&Scene]) -> Result<(ModelState, Vec<EpochLoss>)> {
    let classes = plan.spec.channels_through(0);
    let mut model = ModelState::init(plan.config.arch, classes, &mut stream(plan.seed, "init", 0))?;
    let pool = real_pool(scenes, &plan.spec, 0, None)?;
    let pool: Vec<PoolSample> = pool
        .into_iter()
        .map(|mut s| {
            s.teacher = background_map(1, s.new_labels.height(), s.new_labels.width());
            s
        })
        .collect();
    let curve = train_pools(&mut model, &pool, &[], &plain_config(&plan.config.initial), plan.seed, 0)?;
    Ok((model, curve))
}

/// Everything produced by one incremental step.
pub struct StepOutcome {
    pub model: ModelState,
    pub curve: Vec<EpochLoss>,
    pub fakes: Vec<FakeSample>,
    pub failures: Vec<InversionFailure>,
}

/// Learns step `step >= 1` starting from the previous model.
pub fn run_step(plan: &RunPlan, teacher: &ModelState, scenes: &[&Scene], step: usize) -> Result<StepOutcome> {
    let cfg = &plan.config;
    let spec = &plan.spec;
    if step == 0 || step >= spec.num_steps() {
        return Err(Error::Invalid(format!("step {step} is not incremental")));
    }
    if teacher.classes() != spec.channels_through(step - 1) {
        return Err(Error::Shape("teacher does not match the previous step".into()));
    }
    let student_classes = spec.channels_through(step);
    let mut student = head_expand(
        teacher,
        spec.steps[step].len(),
        cfg.head_sigma,
        &mut stream(plan.seed, "head", step as u64),
    )?;
    student.step = step;
    let mut real = real_pool(scenes, spec, step, Some(teacher))?;
    let fake_count = (cfg.fake_pool_factor * real.len() as f64).round() as usize;
    let mut fakes = Vec::new();
    let mut failures = Vec::new();
    let mut dcfg = cfg.incremental.clone();
    let fake = match plan.method {
        Method::Ft => {
            for s in &mut real {
                s.teacher = background_map(teacher.classes(), s.teacher.height(), s.teacher.width());
            }
            dcfg.lambda = 0.0;
            Vec::new()
        }
        Method::NoFake => Vec::new(),
        Method::NoiseReplay => {
            let mut rng = stream(plan.seed, "noise", step as u64);
            let inv = &cfg.inversion;
            let images: Vec<Tensor> = (0..fake_count)
                .map(|_| noise_image(&mut rng, inv.height, inv.width))
                .collect();
            let refs: Vec<&Tensor> = images.iter().collect();
            let maps = teacher_maps(teacher, &refs)?;
            images
                .into_iter()
                .zip(maps)
                .map(|(image, teacher)| PoolSample {
                    new_labels: LabelMap::background(student_classes, teacher.height(), teacher.width()),
                    image,
                    teacher,
                    provenance: Provenance::Fake,
                })
                .collect()
        }
        Method::Hrhf | Method::HrhfNoKd => {
            if plan.method == Method::HrhfNoKd {
                dcfg.lambda = 0.0;
            }
            if fake_count == 0 {
                Vec::new()
            } else {
                let mut rng = stream(plan.seed, "invert", step as u64);
                let targets = draw_targets(
                    &mut rng,
                    teacher.classes(),
                    fake_count,
                    &cfg.inversion.targets_per_image,
                )?;
                let out = invert(teacher, &targets, &cfg.inversion, &mut rng)?;
                failures = out.failures;
                fakes = out.samples;
                fake_pool_from(&fakes, student_classes)
            }
        }
        Method::Joint => return Err(Error::Invalid("joint training has no incremental steps".into())),
    };
    let curve = train_pools(&mut student, &real, &fake, &dcfg, plan.seed, step)?;
    Ok(StepOutcome {
        model: student,
        curve,
        fakes,
        failures,
    })
}

/// Result of a complete run.
pub struct RunOutcome {
    pub models: Vec<ModelState>,
    pub report: MetricsReport,
    pub curve: Vec<EpochLoss>,
    pub fakes: Vec<Vec<FakeSample>>,
    pub failures: Vec<InversionFailure>,
}

/// Offline training on all classes with complete labels.
pub fn run_joint(plan: &RunPlan, train: &[Scene], test: &[Scene]) -> Result<RunOutcome> {
    let spec = &plan.spec;
    let last = spec.num_steps() - 1;
    let classes = spec.channels_through(last);
    let mut model = ModelState::init(plan.config.arch, classes, &mut stream(plan.seed, "init", 0))?;
    model.step = last;
    let pool: Vec<PoolSample> = train
        .iter()
        .map(|s| {
            Ok(PoolSample {
                image: s.image.clone(),
                new_labels: labels_through(s, spec, last)?,
                teacher: background_map(1, s.height, s.width),
                provenance: Provenance::Real,
            })
        })
        .collect::<Result<_>>()?;
    let curve = train_pools(&mut model, &pool, &[], &plain_config(&plan.config.initial), plan.seed, 0)?;
    let metrics = evaluate(&model, test, spec, last)?;
    Ok(RunOutcome {
        models: vec![model],
        report: MetricsReport {
            method: Method::Joint,
            config_hash: plan.hash(),
            seed: plan.seed,
            history: vec![metrics],
        },
        curve,
        fakes: Vec::new(),
        failures: Vec::new(),
    })
}

/// Runs every step of the plan and evaluates after each one.
pub fn run(plan: &RunPlan, train: &[Scene], test: &[Scene]) -> Result<RunOutcome> {
    let initial = train_step0(plan, train)?;
    run_from(plan, initial, train, test)
}

/// Step-0 model for a plan, independent of the method.
pub fn train_step0(plan: &RunPlan, train: &[Scene]) -> Result<(ModelState, Vec<EpochLoss>)> {
    plan.config.validate()?;
    let split = split_incremental(train, &plan.spec)?;
    let scenes: Vec<&Scene> = split[0].iter().map(|&i| &train[i]).collect();
    train_initial(plan, &scenes)
}

/// Continues a run from an already trained step-0 model, so several methods
/// can share one.
pub fn run_from(
    plan: &RunPlan,
    initial: (ModelState, Vec<EpochLoss>),
    train: &[Scene],
    test: &[Scene],
) -> Result<RunOutcome> {
    plan.config.validate()?;
    if plan.method == Method::Joint {
        return run_joint(plan, train, test);
    }
    let split = split_incremental(train, &plan.spec)?;
    let (mut model, mut curve) = initial;
    let mut history = vec![evaluate(&model, test, &plan.spec, 0)?];
    let mut models = vec![model.clone()];
    let mut fakes = Vec::new();
    let mut failures = Vec::new();
    for step in 1..plan.spec.num_steps() {
        let scenes: Vec<&Scene> = split[step].iter().map(|&i| &train[i]).collect();
        let out = run_step(plan, &model, &scenes, step)?;
        model = out.model;
        curve.extend(out.curve);
        fakes.push(out.fakes);
        failures.extend(out.failures);
        history.push(evaluate(&model, test, &plan.spec, step)?);
        models.push(model.clone());
    }
    Ok(RunOutcome {
        models,
        report: MetricsReport {
            method: plan.method,
            config_hash: plan.hash(),
            seed: plan.seed,
            history,
        },
        curve,
        fakes,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(labels: Vec<u8>) -> LabelMap {
        LabelMap::new(2, 2, 2, labels).unwrap()
    }

    #[test]
    fn hand_counted_confusion() {
        let mut c = Confusion::new(2);
        c.add(&lm(vec![1, 1, 0, 0]), &lm(vec![1, 0, 0, 0])).unwrap();
        let iou = c.iou();
        assert_eq!(iou[1], Some(0.5));
        assert!((iou[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let m = group_mean(&iou, 0..2).unwrap();
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut c = Confusion::new(3);
        let y = LabelMap::new(3, 1, 3, vec![0, 2, 2]).unwrap();
        c.add(&y, &y).unwrap();
        assert_eq!(c.iou(), vec![Some(1.0), None, Some(1.0)]);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut c = Confusion::new(2);
        let gt = lm(vec![1, 1, 0, 0]).with_ignore(vec![false, true, false, false]).unwrap();
        c.add(&gt, &lm(vec![1, 0, 0, 0])).unwrap();
        assert_eq!(c.iou(), vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("lwf").is_err());
    }
}
