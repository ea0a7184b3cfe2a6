//! Toy fully-convolutional segmentation network: `blocks` x (3x3 conv, batch
//! norm, relu) followed by a 1x1 classifier head. Stride 1 everywhere, so the
//! score map has the input resolution.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, ScoreMap};
use crate::numcore::{evaluate, Bindings, Graph, NodeId, Tensor};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub blocks: usize,
    pub width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            blocks: 4,
            width: 16,
        }
    }
}

impl ArchConfig {
    /// Trainable parameter count for a head with `classes` outputs.
    pub fn param_count(&self, classes: usize) -> usize {
        let mut n = 0;
        let mut cin = IMAGE_CHANNELS;
        for _ in 0..self.blocks {
            n += self.width * cin * 9 + 2 * self.width;
            cin = self.width;
        }
        n + classes * cin + classes
    }

    fn head_inputs(&self) -> usize {
        if self.blocks == 0 {
            IMAGE_CHANNELS
        } else {
            self.width
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub blocks: Vec<ConvBlock>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    /// Learning step that produced this model.
    pub step: usize,
}

/// Node handles produced by [`ModelState::build`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub probs: NodeId,
    /// Per-layer (mean, variance) of each batch-norm input over the batch.
    pub batch_stats: Vec<(NodeId, NodeId)>,
    /// Parameter leaves in [`ModelState::param_names`] order (trainable builds only).
    pub params: Vec<NodeId>,
}

fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

impl ModelState {
    pub fn init(arch: ArchConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes == 0 || classes > 256 {
            return Err(Error::Invalid(format!("class count {classes}")));
        }
        let mut blocks = Vec::with_capacity(arch.blocks);
        let mut cin = IMAGE_CHANNELS;
        for _ in 0..arch.blocks {
            blocks.push(ConvBlock {
                weight: he_normal(rng, &[arch.width, cin, 3, 3], cin * 9),
                gamma: Tensor::full(&[arch.width], 1.0),
                beta: Tensor::zeros(&[arch.width]),
                running_mean: Tensor::zeros(&[arch.width]),
                running_var: Tensor::full(&[arch.width], 1.0),
            });
            cin = arch.width;
        }
        Ok(ModelState {
            arch,
            blocks,
            head_weight: he_normal(rng, &[classes, cin, 1, 1], cin),
            head_bias: Tensor::zeros(&[classes]),
            step: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.conv.weight"));
            names.push(format!("block{i}.bn.gamma"));
            names.push(format!("block{i}.bn.beta"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend([&b.weight, &b.gamma, &b.beta]);
        }
        p.extend([&self.head_weight, &self.head_bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.push(&mut b.weight);
            p.push(&mut b.gamma);
            p.push(&mut b.beta);
        }
        p.push(&mut self.head_weight);
        p.push(&mut self.head_bias);
        p
    }

    /// Appends the network to `g` on top of image node `x` (`[N, 3, H, W]`).
    ///
    /// With `trainable`, parameters become differentiable leaves bound in
    /// `binds`; otherwise they are baked in as constants. In eval mode batch
    /// norm uses running statistics; the batch statistics nodes are still
    /// emitted so feature regularizers can read them.
    pub fn build(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        x: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> ForwardNodes {
        let leaf = |g: &mut Graph, binds: &mut Bindings, t: &Tensor, params: &mut Vec<NodeId>| {
            if trainable {
                let id = g.input();
                binds.insert(id, t.clone());
                params.push(id);
                id
            } else {
                g.constant(t.clone())
            }
        };
        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = x;
        for b in &self.blocks {
            let w = leaf(g, binds, &b.weight, &mut params);
            let gamma = leaf(g, binds, &b.gamma, &mut params);
            let beta = leaf(g, binds, &b.beta, &mut params);
            let conv = g.conv2d(h, w, None);
            let mean = g.channel_mean(conv);
            let var = g.channel_var(conv);
            batch_stats.push((mean, var));
            let (m, v) = match mode {
                Mode::Train => (mean, var),
                Mode::Eval => (
                    g.constant(b.running_mean.clone()),
                    g.constant(b.running_var.clone()),
                ),
            };
            let bn = g.batchnorm(conv, m, v, gamma, beta, BN_EPS);
            h = g.relu(bn);
        }
        let hw = leaf(g, binds, &self.head_weight, &mut params);
        let hb = leaf(g, binds, &self.head_bias, &mut params);
        let logits = g.conv2d(h, hw, Some(hb));
        let probs = g.softmax_channels(logits);
        ForwardNodes {
            logits,
            probs,
            batch_stats,
            params,
        }
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        match *images.shape() {
            [_, c, _, _] if c == IMAGE_CHANNELS => Ok(()),
            _ => Err(Error::Shape(format!(
                "expected [N, {IMAGE_CHANNELS}, H, W] images, got {:?}",
                images.shape()
            ))),
        }
    }

    /// Eval-mode probabilities, `[N, C, H, W]`.
    pub fn forward_eval(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let x = g.data();
        binds.insert(x, images.clone());
        let nodes = self.build(&mut g, &mut binds, x, Mode::Eval, false);
        let ev = evaluate(&g, &binds)?;
        Ok(ev.value(nodes.probs).clone())
    }

    /// Probability maps for a batch of images in either mode. Train mode uses
    /// batch statistics and moves the running statistics toward them.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Vec<ScoreMap>> {
        match mode {
            Mode::Eval => ScoreMap::split_batch(&self.forward_eval(images)?),
            Mode::Train => {
                self.check_images(images)?;
                let mut g = Graph::new();
                let mut binds = Bindings::new();
                let x = g.data();
                binds.insert(x, images.clone());
                let nodes = self.build(&mut g, &mut binds, x, Mode::Train, false);
                let ev = evaluate(&g, &binds)?;
                let stats: Vec<(Vec<f64>, Vec<f64>)> = nodes
                    .batch_stats
                    .iter()
                    .map(|&(m, v)| (ev.value(m).data().to_vec(), ev.value(v).data().to_vec()))
                    .collect();
                let probs = ScoreMap::split_batch(ev.value(nodes.probs))?;
                let [n, _, h, w] = *images.shape() else { unreachable!() };
                self.update_running_stats(&stats, n * h * w);
                Ok(probs)
            }
        }
    }

    /// Momentum update of running statistics from biased batch statistics
    /// over `count` values per channel; the variance is stored unbiased.
    pub fn update_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)], count: usize) {
        assert_eq!(stats.len(), self.blocks.len());
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for (b, (mean, var)) in self.blocks.iter_mut().zip(stats) {
            for (r, &m) in b.running_mean.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, &v) in b.running_var.data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    /// Per-pixel argmax of the eval-mode scores for one `[3, H, W]` image.
    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        let batch = single_batch(image)?;
        let maps = ScoreMap::split_batch(&self.forward_eval(&batch)?)?;
        Ok(maps[0].argmax())
    }

    pub fn bit_eq(&self, other: &ModelState) -> bool {
        self.arch == other.arch
            && self.step == other.step
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.weight.bit_eq(&b.weight)
                    && a.gamma.bit_eq(&b.gamma)
                    && a.beta.bit_eq(&b.beta)
                    && a.running_mean.bit_eq(&b.running_mean)
                    && a.running_var.bit_eq(&b.running_var)
            })
            && self.head_weight.bit_eq(&other.head_weight)
            && self.head_bias.bit_eq(&other.head_bias)
    }
}

/// `[3, H, W]` -> `[1, 3, H, W]`.
pub fn single_batch(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(image.clone().reshape(shape)?)
}

/// Stacks `[3, H, W]` images into one batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::Shape("images differ in shape".into()));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(shape, data)?)
}

/// Student initialization: copies every teacher parameter and appends
/// `new_classes` head channels drawn from `N(0, sigma^2)`.
pub fn head_expand(teacher: &ModelState, new_classes: usize, sigma: f64, rng: &mut Rng) -> Result<ModelState> {
    let mut student = teacher.clone();
    if new_classes == 0 {
        return Ok(student);
    }
    let old = teacher.classes();
    let total = old + new_classes;
    if total > 256 {
        return Err(Error::Invalid(format!("class count {total}")));
    }
    let cin = teacher.arch.head_inputs();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut w = teacher.head_weight.data().to_vec();
    let mut b = teacher.head_bias.data().to_vec();
    for _ in 0..new_classes {
        for _ in 0..cin {
            w.push(normal.sample(rng));
        }
        b.push(normal.sample(rng));
    }
    student.head_weight = Tensor::new(vec![total, cin, 1, 1], w)?;
    student.head_bias = Tensor::new(vec![total], b)?;
    Ok(student)
}

/// Uniform noise image `[3, H, W]` in `[0, 1)`.
pub fn noise_image(rng: &mut Rng, height: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[IMAGE_CHANNELS, height, width]);
    for v in t.data_mut() {
        *v = rng.gen::<f64>();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> ModelState {
        let mut rng = stream(1, "init", 0);
        ModelState::init(ArchConfig { blocks: 2, width: 4 }, 3, &mut rng).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = small();
        let mut rng = stream(1, "img", 0);
        let img = single_batch(&noise_image(&mut rng, 6, 5)).unwrap();
        let probs = m.forward_eval(&img).unwrap();
        let maps = ScoreMap::split_batch(&probs).unwrap();
        assert!(maps[0].simplex_error().unwrap() < 1e-12);
    }

    #[test]
    fn eval_is_pure() {
        let mut m = small();
        let mut rng = stream(1, "img", 1);
        let img = single_batch(&noise_image(&mut rng, 6, 6)).unwrap();
        let a = m.forward(&img, Mode::Eval).unwrap();
        let before = m.clone();
        let b = m.forward(&img, Mode::Eval).unwrap();
        assert!(m.bit_eq(&before));
        assert!(a[0].data().iter().zip(b[0].data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn train_forward_moves_running_stats() {
        let mut m = small();
        let mut rng = stream(1, "img", 2);
        let img = single_batch(&noise_image(&mut rng, 6, 6)).unwrap();
        let before = m.clone();
        m.forward(&img, Mode::Train).unwrap();
        assert!(!m.bit_eq(&before));
        assert_eq!(m.params(), before.params());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = small();
        let img = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(m.forward_eval(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn expand_by_zero_is_identity() {
        let m = small();
        let mut rng = stream(1, "head", 0);
        assert!(head_expand(&m, 0, 0.01, &mut rng).unwrap().bit_eq(&m));
    }

    #[test]
    fn expand_keeps_old_rows_and_grows_output() {
        let m = small();
        let mut rng = stream(1, "head", 0);
        let s = head_expand(&m, 1, 0.01, &mut rng).unwrap();
        assert_eq!(s.classes(), 4);
        let cin = m.arch.width;
        assert_eq!(&s.head_weight.data()[..3 * cin], m.head_weight.data());
        assert_eq!(&s.head_bias.data()[..3], m.head_bias.data());
        let mut r2 = stream(1, "img", 3);
        let img = single_batch(&noise_image(&mut r2, 5, 5)).unwrap();
        assert_eq!(s.forward_eval(&img).unwrap().shape(), &[1, 4, 5, 5]);
    }

    #[test]
    fn param_count_is_architecture_function() {
        let m = small();
        assert_eq!(m.param_count(), m.arch.param_count(3));
        assert_eq!(m.param_names().len(), m.params().len());
    }
}
