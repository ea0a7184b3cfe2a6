//! Spatial pooling of per-class score planes into image-level class scores.
//!
//! Scale-aware aggregation is the normalized log-sum-exp
//! `y_k = (1/r) log( mean_ij exp(r s_k,ij) )`; small `r` tends to the spatial
//! mean and large `r` to the spatial max. AVG and MAX are kept as the two
//! limiting variants.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels;
use crate::numcore::{Graph, NodeId};
use crate::rng::Rng;

/// Candidate temperatures for random draws.
pub const DEFAULT_R_SET: [f64; 5] = [0.5, 1.0, 5.0, 10.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    Saa,
    Avg,
    Max,
}

/// Which tensor the pooling reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolInput {
    #[default]
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationSpec {
    pub kind: AggregationKind,
    /// Candidates for per-(image, class) random draws.
    pub r_set: Vec<f64>,
    /// When set, every class uses this temperature instead of a draw.
    #[serde(default)]
    pub fixed_r: Option<f64>,
    #[serde(default)]
    pub input: PoolInput,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        AggregationSpec {
            kind: AggregationKind::Saa,
            r_set: DEFAULT_R_SET.to_vec(),
            fixed_r: None,
            input: PoolInput::Probabilities,
        }
    }
}

impl AggregationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r_set.is_empty() {
            return Err(Error::Invalid("r_set must be non-empty".into()));
        }
        if self.r_set.iter().chain(&self.fixed_r).any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Invalid("temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Temperatures for `classes` channels of one image.
    pub fn draw(&self, rng: &mut Rng, classes: usize) -> Result<Vec<f64>> {
        match self.fixed_r {
            Some(r) => Ok(vec![r; classes]),
            None => sample_r(rng, &self.r_set, classes),
        }
    }
}

/// Read-only view of `channels` planes of `height x width` reals.
#[derive(Debug, Clone, Copy)]
pub struct Planes<'a> {
    pub data: &'a [f64],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> Planes<'a> {
    pub fn new(data: &'a [f64], channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "{} values for {channels}x{height}x{width} planes",
                data.len()
            )));
        }
        Ok(Planes {
            data,
            channels,
            height,
            width,
        })
    }

    fn plane(&self, k: usize) -> &'a [f64] {
        let hw = self.height * self.width;
        &self.data[k * hw..(k + 1) * hw]
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Invalid("score map contains non-finite values".into()))
        }
    }
}

/// Image-level class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoreVector(pub Vec<f64>);

/// Scale-aware aggregation with one temperature for all classes.
pub fn saa_pool(map: Planes<'_>, r: f64) -> Result<ClassScoreVector> {
    saa_pool_per_class(map, &vec![r; map.channels])
}

pub fn saa_pool_per_class(map: Planes<'_>, r: &[f64]) -> Result<ClassScoreVector> {
    if r.len() != map.channels {
        return Err(Error::Shape(format!("{} temperatures for {} classes", r.len(), map.channels)));
    }
    if let Some(bad) = r.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid(format!("temperature must be positive, got {bad}")));
    }
    map.check_finite()?;
    Ok(ClassScoreVector(
        (0..map.channels)
            .map(|k| kernels::lse_plane(map.plane(k), r[k]))
            .collect(),
    ))
}

pub fn avg_pool(map: Planes<'_>) -> Result<ClassScoreVector> {
    map.check_finite()?;
    Ok(ClassScoreVector(
        (0..map.channels)
            .map(|k| {
                let p = map.plane(k);
                p.iter().fold(0.0, |a, &v| a + v) / p.len() as f64
            })
            .collect(),
    ))
}

pub fn max_pool(map: Planes<'_>) -> Result<ClassScoreVector> {
    map.check_finite()?;
    Ok(ClassScoreVector(
        (0..map.channels)
            .map(|k| map.plane(k).iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v)))
            .collect(),
    ))
}

/// Gradient of the aggregated score of one plane with respect to its pixels.
pub fn saa_weights(plane: &[f64], r: f64) -> Vec<f64> {
    kernels::lse_plane_weights(plane, r)
}

/// Independent uniform draw from `r_set` for each of `count` classes.
pub fn sample_r(rng: &mut Rng, r_set: &[f64], count: usize) -> Result<Vec<f64>> {
    if r_set.is_empty() {
        return Err(Error::Invalid("r_set must be non-empty".into()));
    }
    Ok((0..count)
        .map(|_| *r_set.choose(rng).expect("non-empty"))
        .collect())
}

/// Adds the pooling node for `[N, C, H, W]` input `x`; `r` holds one
/// temperature per (image, class) and is ignored by AVG and MAX.
pub fn aggregate_node(g: &mut Graph, x: NodeId, kind: AggregationKind, r: Vec<f64>) -> NodeId {
    match kind {
        AggregationKind::Saa => g.spatial_lse(x, r),
        AggregationKind::Avg => g.spatial_mean(x),
        AggregationKind::Max => g.spatial_max(x),
    }
}
