//! Per-pixel class maps shared by the network, the losses and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Per-pixel class probabilities for one image, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || height == 0 || width == 0 || data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "score map {classes}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(ScoreMap {
            classes,
            height,
            width,
            data,
        })
    }

    /// Per-pixel normalized map: softmax of arbitrary logits.
    pub fn from_logits(classes: usize, height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        let t = Tensor::new(vec![1, classes, height, width], logits.to_vec())?;
        let d = crate::numcore::kernels::Dims4::from_shape(t.shape()).unwrap();
        Self::new(
            classes,
            height,
            width,
            crate::numcore::kernels::softmax_channels(t.data(), d),
        )
    }

    /// Splits an `[N, C, H, W]` tensor into one map per image.
    pub fn split_batch(t: &Tensor) -> Result<Vec<ScoreMap>> {
        let [n, c, h, w] = *t.shape() else {
            return Err(Error::Shape(format!("expected NCHW, got {:?}", t.shape())));
        };
        let per = c * h * w;
        (0..n)
            .map(|i| ScoreMap::new(c, h, w, t.data()[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    /// Stacks maps of equal shape into `[N, C, H, W]`.
    pub fn stack(maps: &[&ScoreMap]) -> Result<Tensor> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack zero maps".into()))?;
        let mut data = Vec::with_capacity(maps.len() * first.data.len());
        for m in maps {
            if (m.classes, m.height, m.width) != (first.classes, first.height, first.width) {
                return Err(Error::Shape("score maps differ in shape".into()));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Tensor::new(
            vec![maps.len(), first.classes, first.height, first.width],
            data,
        )?)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, class: usize) -> &[f64] {
        let hw = self.pixels();
        &self.data[class * hw..(class + 1) * hw]
    }

    pub fn get(&self, class: usize, pixel: usize) -> f64 {
        self.data[class * self.pixels() + pixel]
    }

    /// Largest deviation of a per-pixel channel sum from one, or `None` when
    /// some entry lies outside `[0, 1]`.
    pub fn simplex_error(&self) -> Option<f64> {
        if self.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return None;
        }
        let hw = self.pixels();
        Some(
            (0..hw)
                .map(|p| {
                    let s = (0..self.classes).fold(0.0, |a, c| a + self.data[c * hw + p]);
                    (s - 1.0).abs()
                })
                .fold(0.0, f64::max),
        )
    }

    /// Per-pixel argmax; ties go to the lowest channel.
    pub fn argmax(&self) -> LabelMap {
        let hw = self.pixels();
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * hw + p] > self.data[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.classes, self.height, self.width, labels).expect("argmax in range")
    }
}

/// Per-pixel class indices with an optional ignore mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    classes: usize,
    height: usize,
    width: usize,
    labels: Vec<u8>,
    ignore: Vec<bool>,
}

impl LabelMap {
    pub fn new(classes: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let n = height * width;
        if labels.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "label map {height}x{width} with {} labels",
                labels.len()
            )));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::Invalid(format!("class count {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Invalid(format!("label {bad} >= class count {classes}")));
        }
        Ok(LabelMap {
            classes,
            height,
            width,
            labels,
            ignore: vec![false; n],
        })
    }

    pub fn background(classes: usize, height: usize, width: usize) -> Self {
        Self::new(classes, height, width, vec![0; height * width]).expect("valid shape")
    }

    pub fn with_ignore(mut self, ignore: Vec<bool>) -> Result<Self> {
        if ignore.len() != self.labels.len() {
            return Err(Error::Shape("ignore mask size".into()));
        }
        self.ignore = ignore;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ignore_mask(&self) -> &[bool] {
        &self.ignore
    }

    pub fn is_ignored(&self, pixel: usize) -> bool {
        self.ignore[pixel]
    }

    /// One-hot `C x H x W` view; ignored pixels are all-zero.
    pub fn one_hot(&self) -> Vec<f64> {
        let hw = self.pixels();
        let mut out = vec![0.0; self.classes * hw];
        for (p, (&l, &ig)) in self.labels.iter().zip(&self.ignore).enumerate() {
            if !ig {
                out[l as usize * hw + p] = 1.0;
            }
        }
        out
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels
            .iter()
            .zip(&self.ignore)
            .filter(|(&l, &ig)| !ig && l == class)
            .count()
    }
}
