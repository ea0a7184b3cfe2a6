//! Half-real half-fake distillation: probability rearrangement, label merge,
//! the distillation and segmentation losses, and mixed batch assembly.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, ScoreMap};
use crate::numcore::{adam_step, evaluate, AdamConfig, AdamState, Bindings, Graph, NodeId, Tensor};
use crate::rng::Rng;
use crate::segnet::{stack_images, ModelState, Mode};

/// Floor applied inside every logarithm of the losses.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Fake,
}

/// Which samples of a batch enter the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KdScope {
    #[default]
    Both,
    Real,
    Fake,
}

impl KdScope {
    fn includes(self, p: Provenance) -> bool {
        match self {
            KdScope::Both => true,
            KdScope::Real => p == Provenance::Real,
            KdScope::Fake => p == Provenance::Fake,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the distillation term.
    pub lambda: f64,
    /// Real : fake parts of each mini-batch.
    pub ratio: [u32; 2],
    pub batch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    #[serde(default)]
    pub kd_scope: KdScope,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            ratio: [1, 1],
            batch: 8,
            epochs: 20,
            adam: AdamConfig::with_lr(1e-2),
            kd_scope: KdScope::Both,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Invalid("lambda must be >= 0".into()));
        }
        if self.ratio.iter().any(|&r| r == 0) {
            return Err(Error::Invalid("ratio parts must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Folds the probabilities of channels `old_count..C` into background.
pub fn probability_rearrange(s_t: &ScoreMap, old_count: usize) -> Result<ScoreMap> {
    let c = s_t.classes();
    if old_count == 0 || old_count > c {
        return Err(Error::Shape(format!(
            "cannot rearrange {c} channels onto {old_count}"
        )));
    }
    let hw = s_t.pixels();
    let mut data = s_t.data()[..old_count * hw].to_vec();
    for k in old_count..c {
        for (d, &v) in data[..hw].iter_mut().zip(s_t.plane(k)) {
            *d += v;
        }
    }
    ScoreMap::new(old_count, s_t.height(), s_t.width(), data)
}

/// Full-class hard labels: per pixel, argmax over the teacher probabilities
/// concatenated with the one-hot of the new-class ground truth. Ties go to
/// the highest channel, so annotated new classes win against a teacher
/// probability of exactly one.
///
/// `new_labels` is over the student's channels; values below the teacher's
/// channel count other than 0 are rejected.
pub fn label_merge(teacher: &ScoreMap, new_labels: &LabelMap) -> Result<LabelMap> {
    let old = teacher.classes();
    let total = new_labels.classes();
    if teacher.height() != new_labels.height() || teacher.width() != new_labels.width() {
        return Err(Error::Shape("teacher map and labels differ in size".into()));
    }
    if total < old {
        return Err(Error::Shape(format!("{total} label channels < {old} teacher channels")));
    }
    let hw = teacher.pixels();
    let mut merged = Vec::with_capacity(hw);
    for p in 0..hw {
        let l = new_labels.labels()[p] as usize;
        if l != 0 && l < old {
            return Err(Error::Invalid(format!("label {l} is not a new class")));
        }
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..total {
            let v = if c < old {
                teacher.get(c, p)
            } else if c == l {
                1.0
            } else {
                0.0
            };
            if v >= best_v {
                best_v = v;
                best = c;
            }
        }
        merged.push(best as u8);
    }
    LabelMap::new(total, teacher.height(), teacher.width(), merged)?
        .with_ignore(new_labels.ignore_mask().to_vec())
}

/// Pixel-averaged cross-entropy of the teacher map against the rearranged
/// student map.
pub fn kd_loss(teacher: &ScoreMap, student: &ScoreMap) -> Result<f64> {
    if (teacher.classes(), teacher.height(), teacher.width())
        != (student.classes(), student.height(), student.width())
    {
        return Err(Error::Shape("teacher and student maps differ".into()));
    }
    let mut s = 0.0;
    for (&t, &q) in teacher.data().iter().zip(student.data()) {
        if t != 0.0 {
            s += t * q.max(LOG_FLOOR).ln();
        }
    }
    Ok(-s / teacher.pixels() as f64)
}

/// Pixel-averaged cross-entropy against hard labels; ignored pixels drop out
/// of both the sum and the count.
pub fn seg_loss(labels: &LabelMap, s_t: &ScoreMap) -> Result<f64> {
    if labels.classes() != s_t.classes() || labels.pixels() != s_t.pixels() {
        return Err(Error::Shape("labels and score map differ".into()));
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for p in 0..labels.pixels() {
        if labels.is_ignored(p) {
            continue;
        }
        s += s_t.get(labels.labels()[p] as usize, p).max(LOG_FLOOR).ln();
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(-s / n as f64)
}

/// Training sample held in a pool.
#[derive(Debug, Clone)]
pub struct PoolSample {
    /// `[3, H, W]`.
    pub image: Tensor,
    /// New-class labels over the student channels; all background for fakes.
    pub new_labels: LabelMap,
    /// Cached eval-mode teacher probabilities.
    pub teacher: ScoreMap,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub images: Tensor,
    pub provenance: Vec<Provenance>,
    pub new_labels: Vec<LabelMap>,
    pub teacher: Vec<ScoreMap>,
}

impl SampleBatch {
    pub fn from_samples(samples: &[&PoolSample]) -> Result<Self> {
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        Ok(SampleBatch {
            images: stack_images(&images)?,
            provenance: samples.iter().map(|s| s.provenance).collect(),
            new_labels: samples.iter().map(|s| s.new_labels.clone()).collect(),
            teacher: samples.iter().map(|s| s.teacher.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }
}

/// Real and fake counts for one batch: `ceil(batch * a / (a + b))` real,
/// the remainder fake.
pub fn batch_counts(batch: usize, ratio: [u32; 2]) -> (usize, usize) {
    let (a, b) = (ratio[0] as usize, ratio[1] as usize);
    let real = (batch * a).div_ceil(a + b);
    (real, batch - real)
}

/// Draws pool indices without replacement, reshuffling when a pool is used up.
#[derive(Debug, Clone)]
pub struct MixedSampler {
    real_len: usize,
    fake_len: usize,
    real_queue: VecDeque<usize>,
    fake_queue: VecDeque<usize>,
    warned: bool,
}

impl MixedSampler {
    pub fn new(real_len: usize, fake_len: usize) -> Self {
        MixedSampler {
            real_len,
            fake_len,
            real_queue: VecDeque::new(),
            fake_queue: VecDeque::new(),
            warned: false,
        }
    }

    fn draw(queue: &mut VecDeque<usize>, len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if queue.is_empty() {
                let mut order: Vec<usize> = (0..len).collect();
                order.shuffle(rng);
                queue.extend(order);
            }
            out.push(queue.pop_front().expect("refilled"));
        }
        out
    }

    /// Next batch as `(provenance, pool index)` pairs in shuffled order.
    pub fn next(&mut self, cfg: &DistillConfig, rng: &mut Rng) -> Result<Vec<(Provenance, usize)>> {
        let (mut real, mut fake) = batch_counts(cfg.batch, cfg.ratio);
        if fake > 0 && self.fake_len == 0 {
            if !self.warned {
                log::warn!("fake pool is empty; filling batches with real samples");
                self.warned = true;
            }
            real += fake;
            fake = 0;
        }
        if real > 0 && self.real_len == 0 {
            return Err(Error::Invalid("real pool is empty".into()));
        }
        let mut plan: Vec<(Provenance, usize)> = Self::draw(&mut self.real_queue, self.real_len, real, rng)
            .into_iter()
            .map(|i| (Provenance::Real, i))
            .chain(
                Self::draw(&mut self.fake_queue, self.fake_len, fake, rng)
                    .into_iter()
                    .map(|i| (Provenance::Fake, i)),
            )
            .collect();
        plan.shuffle(rng);
        Ok(plan)
    }

    /// True once a batch had to be filled from the real pool alone.
    pub fn fell_back(&self) -> bool {
        self.warned
    }

    pub fn real_per_batch(&self, cfg: &DistillConfig) -> usize {
        if self.fake_len == 0 {
            cfg.batch
        } else {
            batch_counts(cfg.batch, cfg.ratio).0.max(1)
        }
    }
}

/// One mixed batch drawn from the pools.
pub fn make_batch(
    real_pool: &[PoolSample],
    fake_pool: &[PoolSample],
    sampler: &mut MixedSampler,
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<SampleBatch> {
    let plan = sampler.next(cfg, rng)?;
    let samples: Vec<&PoolSample> = plan
        .iter()
        .map(|&(p, i)| match p {
            Provenance::Real => &real_pool[i],
            Provenance::Fake => &fake_pool[i],
        })
        .collect();
    SampleBatch::from_samples(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub kd: f64,
    pub seg: f64,
    pub total: f64,
}

/// Loss nodes of one distillation objective.
pub struct LossNodes {
    pub kd: NodeId,
    pub seg: NodeId,
    pub total: NodeId,
}

/// Adds the distillation, segmentation and combined losses on top of the
/// student probability node (`[N, C_t, H, W]`).
pub fn build_losses(
    g: &mut Graph,
    probs: NodeId,
    batch: &SampleBatch,
    student_classes: usize,
    cfg: &DistillConfig,
) -> Result<LossNodes> {
    let n = batch.len();
    let first = batch.teacher.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let old = first.classes();
    let (h, w) = (first.height(), first.width());
    let hw = h * w;
    if old > student_classes {
        return Err(Error::Shape(format!("teacher has {old} channels, student {student_classes}")));
    }

    // distillation target: teacher maps, zeroed for samples outside the scope
    let mut tdata = Vec::with_capacity(n * old * hw);
    let mut kd_samples = 0usize;
    for (t, &p) in batch.teacher.iter().zip(&batch.provenance) {
        if t.classes() != old || t.height() != h || t.width() != w {
            return Err(Error::Shape("teacher maps differ in shape".into()));
        }
        if cfg.kd_scope.includes(p) {
            tdata.extend_from_slice(t.data());
            kd_samples += 1;
        } else {
            tdata.extend(std::iter::repeat(0.0).take(old * hw));
        }
    }
    let target = g.constant(Tensor::new(vec![n, old, h, w], tdata)?);
    let rearranged = g.rearrange(probs, old);
    let log_r = g.log(rearranged, LOG_FLOOR);
    let prod = g.mul(target, log_r);
    let s = g.sum(prod);
    let kd = g.scale(s, -1.0 / (kd_samples.max(1) * hw) as f64);

    let mut ydata = Vec::with_capacity(n * student_classes * hw);
    let mut valid = 0usize;
    for (t, nl) in batch.teacher.iter().zip(&batch.new_labels) {
        if nl.classes() != student_classes {
            return Err(Error::Shape(format!(
                "labels over {} channels, student has {student_classes}",
                nl.classes()
            )));
        }
        let merged = label_merge(t, nl)?;
        valid += merged.ignore_mask().iter().filter(|&&i| !i).count();
        ydata.extend(merged.one_hot());
    }
    let onehot = g.constant(Tensor::new(vec![n, student_classes, h, w], ydata)?);
    let log_p = g.log(probs, LOG_FLOOR);
    let prod = g.mul(onehot, log_p);
    let s = g.sum(prod);
    let seg = g.scale(s, -1.0 / valid.max(1) as f64);

    let weighted = g.scale(kd, cfg.lambda);
    let total = g.add(weighted, seg);
    Ok(LossNodes { kd, seg, total })
}

/// One optimizer step on the student with `lambda * kd + seg`.
///
/// The teacher only supplies the cached maps in `batch`; it is checked for
/// channel agreement and never written. On any error the student and the
/// optimizer state are left untouched.
pub fn hrhf_train_step(
    teacher: &ModelState,
    student: &mut ModelState,
    adam: &mut AdamState,
    batch: &SampleBatch,
    cfg: &DistillConfig,
) -> Result<StepLosses> {
    if batch.teacher.iter().any(|t| t.classes() != teacher.classes()) {
        return Err(Error::Shape("batch teacher maps do not match teacher channels".into()));
    }
    supervised_step(student, adam, batch, cfg)
}

/// Shared student update; with an all-background teacher this is plain
/// cross-entropy training.
pub(crate) fn supervised_step(
    student: &mut ModelState,
    adam: &mut AdamState,
    batch: &SampleBatch,
    cfg: &DistillConfig,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let x = g.data();
    binds.insert(x, batch.images.clone());
    let nodes = student.build(&mut g, &mut binds, x, Mode::Train, true);
    let losses = build_losses(&mut g, nodes.probs, batch, student.classes(), cfg)?;
    let ev = evaluate(&g, &binds)?;
    let out = StepLosses {
        kd: ev.value(losses.kd).item(),
        seg: ev.value(losses.seg).item(),
        total: ev.value(losses.total).item(),
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("{out:?}")));
    }
    let grads = ev.backward(losses.total)?;
    let grad_list: Vec<&Tensor> = nodes.params.iter().map(|id| &grads[id]).collect();
    let stats: Vec<(Vec<f64>, Vec<f64>)> = nodes
        .batch_stats
        .iter()
        .map(|&(m, v)| (ev.value(m).data().to_vec(), ev.value(v).data().to_vec()))
        .collect();
    let [n, _, h, w] = *batch.images.shape() else {
        unreachable!("stacked images are 4-d")
    };
    {
        let mut params = student.params_mut();
        adam_step(&mut params, &grad_list, adam)?;
    }
    student.update_running_stats(&stats, n * h * w);
    Ok(out)
}

pub fn new_optimizer(student: &ModelState, cfg: &DistillConfig) -> AdamState {
    AdamState::for_params(cfg.adam, &student.params())
}
