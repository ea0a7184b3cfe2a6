//! Fake-image synthesis by optimizing the input of a frozen model so that its
//! pooled class scores hit chosen image-level targets.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_node, AggregationSpec, PoolInput};
use crate::error::{Error, Result};
use crate::maps::ScoreMap;
use crate::numcore::{adam_step, evaluate, AdamConfig, AdamState, Bindings, Graph, NodeId, Tensor};
use crate::rng::{stream, Rng};
use crate::segnet::{noise_image, single_batch, ModelState, Mode, IMAGE_CHANNELS};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    /// Images per call when a pool is built in groups.
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub stop_loss: f64,
    pub w_tv: f64,
    pub w_l2: f64,
    pub w_feat: f64,
    pub aggregation: AggregationSpec,
    /// Relative weights for drawing 1, 2, ... target classes per image.
    pub targets_per_image: Vec<f64>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 300,
            lr: 0.25,
            batch: 8,
            height: 64,
            width: 64,
            stop_loss: 0.05,
            w_tv: 1e-2,
            w_l2: 1e-4,
            w_feat: 1e-2,
            aggregation: AggregationSpec::default(),
            targets_per_image: vec![1.0],
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.stop_loss > 0.0) {
            return Err(Error::Invalid("lr and stop_loss must be positive".into()));
        }
        if [self.w_tv, self.w_l2, self.w_feat].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("regularizer weights must be >= 0".into()));
        }
        if self.height == 0 || self.width == 0 || self.batch == 0 {
            return Err(Error::Invalid("resolution and batch must be positive".into()));
        }
        if self.targets_per_image.is_empty()
            || self.targets_per_image.iter().any(|w| !(*w >= 0.0))
            || self.targets_per_image.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Invalid("targets_per_image needs non-negative weights".into()));
        }
        self.aggregation.validate()
    }
}

/// Multi-hot image-level target over the teacher's channels; channel 0
/// (background) is never set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetVector(Vec<bool>);

impl TargetVector {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.first().copied().unwrap_or(true) {
            return Err(Error::Invalid("background cannot be a target".into()));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Invalid("target needs a foreground class".into()));
        }
        Ok(TargetVector(bits))
    }

    pub fn single(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Invalid(format!("class {class} out of {classes}")));
        }
        let mut bits = vec![false; classes];
        bits[class] = true;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&k| self.0[k]).collect()
    }
}

/// Draws `count` targets over `classes` channels: the number of classes per
/// image follows `weights`, the classes themselves are uniform without
/// replacement.
pub fn draw_targets(rng: &mut Rng, classes: usize, count: usize, weights: &[f64]) -> Result<Vec<TargetVector>> {
    let fg = classes.saturating_sub(1);
    if fg == 0 {
        return Err(Error::Invalid("no foreground classes to target".into()));
    }
    let total: f64 = weights.iter().take(fg).sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("no usable target-count weight".into()));
    }
    (0..count)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut k = 1;
            for (i, w) in weights.iter().take(fg).enumerate() {
                acc += w;
                k = i + 1;
                if u < acc {
                    break;
                }
            }
            let mut bits = vec![false; classes];
            for c in sample(rng, fg, k) {
                bits[c + 1] = true;
            }
            TargetVector::new(bits)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FakeSample {
    /// `[3, H, W]` in `[0, 1]`.
    #[serde(skip)]
    pub image: Tensor,
    pub target: TargetVector,
    /// Temperature per teacher channel.
    pub r: Vec<f64>,
    pub initial_cls: f64,
    pub final_cls: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Eval-mode teacher probabilities on the final image.
    #[serde(skip)]
    pub teacher_map: ScoreMap,
}

impl FakeSample {
    /// Fraction of pixels whose teacher argmax is one of the targets.
    pub fn coverage(&self) -> f64 {
        let labels = self.teacher_map.argmax();
        let hit = labels
            .labels()
            .iter()
            .filter(|&&l| self.target.bits()[l as usize])
            .count();
        hit as f64 / labels.pixels() as f64
    }
}

/// Failed sample with its diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct InversionFailure {
    pub index: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct InversionOutput {
    pub samples: Vec<FakeSample>,
    pub failures: Vec<InversionFailure>,
}

/// `w_tv * TV(x) + w_l2 * |x|^2 / (H W)` for `[N, 3, H, W]` input.
pub fn image_prior_node(g: &mut Graph, x: NodeId, pixels: usize, w_tv: f64, w_l2: f64) -> NodeId {
    let tv = g.total_variation(x);
    let tv = g.scale(tv, w_tv);
    let sq = g.mul(x, x);
    let l2 = g.sum(sq);
    let l2 = g.scale(l2, w_l2 / pixels as f64);
    g.add(tv, l2)
}

/// Direct evaluation of the image prior on a `[3, H, W]` image.
pub fn image_prior(x: &Tensor, w_tv: f64, w_l2: f64) -> Result<f64> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", x.shape())));
    };
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let id = g.data();
    binds.insert(id, x.clone().reshape(vec![1, c, h, w])?);
    let out = image_prior_node(&mut g, id, h * w, w_tv, w_l2);
    Ok(evaluate(&g, &binds)?.value(out).item())
}

/// `sum_l |mu_l - mu_run_l|^2 + |var_l - var_run_l|^2`.
pub fn feature_reg_node(g: &mut Graph, stats: &[(NodeId, NodeId)], model: &ModelState) -> Result<NodeId> {
    if stats.len() != model.blocks.len() {
        return Err(Error::Shape(format!(
            "{} statistic pairs for {} batch-norm layers",
            stats.len(),
            model.blocks.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * stats.len());
    for (&(m, v), b) in stats.iter().zip(&model.blocks) {
        for (node, run) in [(m, &b.running_mean), (v, &b.running_var)] {
            let r = g.constant(run.clone());
            let d = g.sub(node, r);
            let sq = g.mul(d, d);
            terms.push(g.sum(sq));
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    Ok(acc)
}

/// Direct evaluation of the feature regularizer from plain statistics.
pub fn feature_reg(batch: &[(Vec<f64>, Vec<f64>)], running: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if batch.len() != running.len() {
        return Err(Error::Shape(format!(
            "{} batch layers vs {} running layers",
            batch.len(),
            running.len()
        )));
    }
    let mut s = 0.0;
    for ((bm, bv), (rm, rv)) in batch.iter().zip(running) {
        if bm.len() != rm.len() || bv.len() != rv.len() {
            return Err(Error::Shape("channel counts differ".into()));
        }
        for (a, b) in bm.iter().zip(rm).chain(bv.iter().zip(rv)) {
            s += (a - b) * (a - b);
        }
    }
    Ok(s)
}

/// Binary cross-entropy of pooled scores `[1, C]` against a multi-hot target,
/// summed over foreground channels and divided by the number of targets.
pub fn classification_node(g: &mut Graph, pooled: NodeId, target: &TargetVector) -> Result<NodeId> {
    let c = target.classes();
    let pos: Vec<f64> = target.bits().iter().map(|&b| b as u8 as f64).collect();
    let neg: Vec<f64> = (0..c)
        .map(|k| if k > 0 && !target.bits()[k] { 1.0 } else { 0.0 })
        .collect();
    let n_targets = target.indices().len() as f64;
    let pos = g.constant(Tensor::new(vec![1, c], pos)?);
    let neg = g.constant(Tensor::new(vec![1, c], neg)?);
    let log_p = g.log(pooled, LOG_FLOOR);
    let a = g.mul(pos, log_p);
    let flipped = g.scale(pooled, -1.0);
    let one_minus = g.offset(flipped, 1.0);
    let log_q = g.log(one_minus, LOG_FLOOR);
    let b = g.mul(neg, log_q);
    let both = g.add(a, b);
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / n_targets))
}

/// BCE on a given score vector, for hand-made checks.
pub fn classification_loss(scores: &[f64], target: &TargetVector) -> Result<f64> {
    if scores.len() != target.classes() {
        return Err(Error::Shape("score and target lengths differ".into()));
    }
    let mut s = 0.0;
    for (&y, &on) in scores.iter().zip(target.bits()).skip(1) {
        s += if on {
            y.max(LOG_FLOOR).ln()
        } else {
            (1.0 - y).max(LOG_FLOOR).ln()
        };
    }
    Ok(-s / target.indices().len() as f64)
}

/// Handles into an inversion objective graph.
pub struct InversionGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub x: NodeId,
    pub probs: NodeId,
    pub cls: NodeId,
    pub prior: NodeId,
    pub feat: NodeId,
    pub total: NodeId,
}

/// Builds the full objective for one `[1, 3, H, W]` image. The teacher's
/// parameters are baked in as constants and the image is the only
/// differentiable leaf.
pub fn inversion_graph(
    teacher: &ModelState,
    image: &Tensor,
    target: &TargetVector,
    r: &[f64],
    cfg: &InversionConfig,
) -> Result<InversionGraph> {
    let [1, c, h, w] = *image.shape() else {
        return Err(Error::Shape(format!("expected one image, got {:?}", image.shape())));
    };
    if c != IMAGE_CHANNELS {
        return Err(Error::Shape(format!("{c} image channels")));
    }
    if target.classes() != teacher.classes() || r.len() != teacher.classes() {
        return Err(Error::Shape("target or r length does not match the teacher".into()));
    }
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let x = g.input();
    binds.insert(x, image.clone());
    let nodes = teacher.build(&mut g, &mut binds, x, Mode::Eval, false);
    let pool_in = match cfg.aggregation.input {
        PoolInput::Probabilities => nodes.probs,
        PoolInput::Logits => nodes.logits,
    };
    let mut pooled = aggregate_node(&mut g, pool_in, cfg.aggregation.kind, r.to_vec());
    if cfg.aggregation.input == PoolInput::Logits {
        pooled = g.sigmoid(pooled);
    }
    let cls = classification_node(&mut g, pooled, target)?;
    let prior = image_prior_node(&mut g, x, h * w, cfg.w_tv, cfg.w_l2);
    let feat = feature_reg_node(&mut g, &nodes.batch_stats, teacher)?;
    let wf = g.scale(feat, cfg.w_feat);
    let reg = g.add(prior, wf);
    let total = g.add(cls, reg);
    Ok(InversionGraph {
        graph: g,
        bindings: binds,
        x,
        probs: nodes.probs,
        cls,
        prior,
        feat,
        total,
    })
}

/// Scalar objective for one image; convenience for tests and reports.
pub fn inversion_loss(
    teacher: &ModelState,
    image: &Tensor,
    target: &TargetVector,
    r: &[f64],
    cfg: &InversionConfig,
) -> Result<f64> {
    let ig = inversion_graph(teacher, &single_batch(image)?, target, r, cfg)?;
    Ok(evaluate(&ig.graph, &ig.bindings)?.value(ig.total).item())
}

/// Optimizes one image from seeded noise.
pub fn invert_one(
    teacher: &ModelState,
    target: &TargetVector,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<FakeSample> {
    let mut rng = stream(seed, "sample", 0);
    let mut image = single_batch(&noise_image(&mut rng, cfg.height, cfg.width))?;
    let r = cfg.aggregation.draw(&mut rng, teacher.classes())?;
    let mut ig = inversion_graph(teacher, &image, target, &r, cfg)?;
    let mut adam = AdamState::for_params(AdamConfig::with_lr(cfg.lr), &[&image]);
    let mut initial = None;
    let mut it = 0;
    let (final_cls, final_loss, probs) = loop {
        ig.bindings.insert(ig.x, image.clone());
        let ev = evaluate(&ig.graph, &ig.bindings)?;
        let cls = ev.value(ig.cls).item();
        let loss = ev.value(ig.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("inversion loss at iteration {it}")));
        }
        initial.get_or_insert((cls, loss));
        if loss < cfg.stop_loss || it == cfg.steps {
            break (cls, loss, ev.value(ig.probs).clone());
        }
        let grads = ev.backward(ig.total)?;
        let gx = grads[&ig.x].clone();
        drop(ev);
        adam_step(&mut [&mut image], &[&gx], &mut adam)?;
        for v in image.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        it += 1;
    };
    let (initial_cls, initial_loss) = initial.expect("evaluated at least once");
    let [_, c, h, w] = *image.shape() else { unreachable!() };
    Ok(FakeSample {
        image: image.reshape(vec![c, h, w])?,
        target: target.clone(),
        r,
        initial_cls,
        final_cls,
        initial_loss,
        final_loss,
        iterations: it,
        seed,
        teacher_map: ScoreMap::split_batch(&probs)?.remove(0),
    })
}

/// Worker count from `HRHF_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("HRHF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Inverts the teacher once per target. Each sample gets its own stream split
/// from one draw of `rng`, so results do not depend on the worker count.
/// Samples whose loss turns non-finite are reported in `failures`.
pub fn invert(
    teacher: &ModelState,
    targets: &[TargetVector],
    cfg: &InversionConfig,
    rng: &mut Rng,
) -> Result<InversionOutput> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Invalid("no inversion targets".into()));
    }
    let master: u64 = rng.gen();
    let seeds: Vec<u64> = (0..targets.len())
        .map(|i| crate::rng::derive_seed(master, "inversion", i as u64))
        .collect();
    let run = |i: usize| invert_one(teacher, &targets[i], cfg, seeds[i]);
    let threads = worker_threads();
    let results: Vec<Result<FakeSample>> = if threads == 1 {
        (0..targets.len()).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Invalid(e.to_string()))?;
        pool.install(|| (0..targets.len()).into_par_iter().map(run).collect())
    };
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => samples.push(s),
            Err(e @ (Error::NonFinite(_) | Error::Num(_))) => {
                log::warn!("inversion sample {i} aborted: {e}");
                failures.push(InversionFailure {
                    index: i,
                    seed: seeds[i],
                    message: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(InversionOutput { samples, failures })
}
