//! Checks shared by the property suites and the acceptance target. Each
//! returns a one-line summary on success and a diagnostic on failure.
#![allow(dead_code)]

use std::time::Instant;

use rand::Rng as _;

use hrhf_core::aggregation::{avg_pool, max_pool, saa_pool, AggregationKind, Planes, DEFAULT_R_SET};
use hrhf_core::distill::{build_losses, label_merge, probability_rearrange, DistillConfig, KdScope, LossNodes, PoolSample, Provenance, SampleBatch};
use hrhf_core::inversion::{inversion_graph, InversionConfig, TargetVector};
use hrhf_core::maps::{LabelMap, ScoreMap};
use hrhf_core::numcore::{evaluate, grad_check, Bindings, Graph, NodeId, Tensor};
use hrhf_core::rng::{stream, Rng};
use hrhf_core::segnet::{ArchConfig, Mode, ModelState};

pub type Check = Result<String, String>;

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(lo..hi);
    }
    t
}

// ---------------------------------------------------------------- gradients

pub const GRAD_INSTANCES: u64 = 100;
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub struct Case {
    pub graph: Graph,
    pub binds: Bindings,
    pub out: NodeId,
}

pub type Builder = Box<dyn Fn(&mut Rng) -> Case>;

/// Appends `sum(node * P)` for a random constant `P`, so every output entry
/// contributes to the checked scalar.
fn project(g: &mut Graph, binds: &Bindings, node: NodeId, rng: &mut Rng) -> NodeId {
    let shape = evaluate(g, binds).unwrap().value(node).shape().to_vec();
    let p = g.constant(uniform(rng, &shape, -1.0, 1.0));
    let m = g.mul(node, p);
    g.sum(m)
}

/// A primitive on fresh differentiable leaves with the given shapes and ranges.
fn primitive(rng: &mut Rng, inputs: &[(&[usize], f64, f64)], op: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> Case {
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|&(shape, lo, hi)| {
            let id = g.input();
            binds.insert(id, uniform(rng, shape, lo, hi));
            id
        })
        .collect();
    let y = op(&mut g, &ids);
    let out = project(&mut g, &binds, y, rng);
    Case { graph: g, binds, out }
}

fn dims(rng: &mut Rng) -> [usize; 4] {
    [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5)]
}

fn temps(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| DEFAULT_R_SET[rng.gen_range(0..DEFAULT_R_SET.len())]).collect()
}

fn unary(lo: f64, hi: f64, op: fn(&mut Graph, NodeId) -> NodeId) -> Builder {
    Box::new(move |r| {
        let s = dims(r);
        primitive(r, &[(&s, lo, hi)], |g, x| op(g, x[0]))
    })
}

fn binary(op: fn(&mut Graph, NodeId, NodeId) -> NodeId) -> Builder {
    Box::new(move |r| {
        let s = dims(r);
        primitive(r, &[(&s, -2.0, 2.0), (&s, -2.0, 2.0)], |g, x| op(g, x[0], x[1]))
    })
}

pub fn tiny_model(rng: &mut Rng, classes: usize) -> ModelState {
    let mut m = ModelState::init(ArchConfig { blocks: 1, width: 2 }, classes, rng).unwrap();
    for b in &mut m.blocks {
        b.running_mean = uniform(rng, &[2], -0.5, 0.5);
        b.running_var = uniform(rng, &[2], 0.5, 1.5);
        b.gamma = uniform(rng, &[2], 0.5, 1.5);
        b.beta = uniform(rng, &[2], -0.5, 0.5);
    }
    m
}

pub fn random_probs(rng: &mut Rng, classes: usize, h: usize, w: usize) -> ScoreMap {
    let logits: Vec<f64> = (0..classes * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
    ScoreMap::from_logits(classes, h, w, &logits).unwrap()
}

fn inversion_case(kind: AggregationKind) -> Builder {
    Box::new(move |r| {
        let classes = r.gen_range(2..4);
        let teacher = tiny_model(r, classes);
        let (h, w) = (r.gen_range(3..5), r.gen_range(3..5));
        let image = uniform(r, &[1, 3, h, w], 0.0, 1.0);
        let target = TargetVector::single(classes, r.gen_range(1..classes)).unwrap();
        let t = temps(r, classes);
        let mut cfg = InversionConfig { w_tv: 0.3, w_l2: 0.2, w_feat: 0.1, height: h, width: w, ..Default::default() };
        cfg.aggregation.kind = kind;
        let ig = inversion_graph(&teacher, &image, &target, &t, &cfg).unwrap();
        Case { graph: ig.graph, binds: ig.bindings, out: ig.total }
    })
}

/// Student forward in training mode plus the distillation objectives.
fn distill_case(pick: fn(&LossNodes) -> NodeId) -> Builder {
    Box::new(move |r| {
        let old = r.gen_range(2..4);
        let student_classes = old + r.gen_range(1..3);
        let student = tiny_model(r, student_classes);
        let (h, w) = (r.gen_range(2..4), r.gen_range(2..4));
        let samples: Vec<PoolSample> = (0..r.gen_range(1..4))
            .map(|_| {
                let provenance = if r.gen_bool(0.5) { Provenance::Real } else { Provenance::Fake };
                let labels: Vec<u8> = (0..h * w)
                    .map(|_| match provenance {
                        Provenance::Real if r.gen_bool(0.4) => r.gen_range(old..student_classes) as u8,
                        _ => 0,
                    })
                    .collect();
                let ignore: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.1)).collect();
                PoolSample {
                    image: uniform(r, &[3, h, w], 0.0, 1.0),
                    new_labels: LabelMap::new(student_classes, h, w, labels).unwrap().with_ignore(ignore).unwrap(),
                    teacher: random_probs(r, old, h, w),
                    provenance,
                }
            })
            .collect();
        let refs: Vec<&PoolSample> = samples.iter().collect();
        let batch = SampleBatch::from_samples(&refs).unwrap();
        let kd_scope = [KdScope::Both, KdScope::Real, KdScope::Fake][r.gen_range(0..3)];
        let cfg = DistillConfig { lambda: r.gen_range(0.1..2.0), kd_scope, ..Default::default() };
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let x = g.data();
        binds.insert(x, batch.images.clone());
        let nodes = student.build(&mut g, &mut binds, x, Mode::Train, true);
        let losses = build_losses(&mut g, nodes.probs, &batch, student_classes, &cfg).unwrap();
        let out = pick(&losses);
        Case { graph: g, binds, out }
    })
}

/// Every differentiable primitive, then the composite objectives.
pub fn grad_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", binary(Graph::add)),
        ("sub", binary(Graph::sub)),
        ("mul", binary(Graph::mul)),
        (
            "scale",
            Box::new(|r| {
                let (s, c) = (dims(r), r.gen_range(-3.0..3.0));
                primitive(r, &[(&s, -2.0, 2.0)], |g, x| g.scale(x[0], c))
            }),
        ),
        (
            "offset",
            Box::new(|r| {
                let (s, c) = (dims(r), r.gen_range(-3.0..3.0));
                primitive(r, &[(&s, -2.0, 2.0)], |g, x| g.offset(x[0], c))
            }),
        ),
        ("relu", unary(-2.0, 2.0, Graph::relu)),
        ("exp", unary(-2.0, 2.0, Graph::exp)),
        ("sigmoid", unary(-6.0, 6.0, Graph::sigmoid)),
        ("log", unary(0.05, 3.0, |g, x| g.log(x, 1e-12))),
        // about half the entries sit under the floor and get zero gradient
        ("log_floor", unary(0.0, 0.2, |g, x| g.log(x, 0.1))),
        ("sum", unary(-2.0, 2.0, Graph::sum)),
        ("mean", unary(-2.0, 2.0, Graph::mean)),
        ("channel_mean", unary(-2.0, 2.0, Graph::channel_mean)),
        ("channel_var", unary(-2.0, 2.0, Graph::channel_var)),
        ("spatial_mean", unary(-2.0, 2.0, Graph::spatial_mean)),
        ("spatial_max", unary(-2.0, 2.0, Graph::spatial_max)),
        (
            "spatial_lse",
            Box::new(|r| {
                let s = dims(r);
                let t = temps(r, s[0] * s[1]);
                primitive(r, &[(&s, 0.0, 1.0)], move |g, x| g.spatial_lse(x[0], t.clone()))
            }),
        ),
        (
            "total_variation",
            Box::new(|r| {
                let s = [1, 3, r.gen_range(2..6), r.gen_range(2..6)];
                primitive(r, &[(&s, 0.0, 1.0)], |g, x| g.total_variation(x[0]))
            }),
        ),
        (
            "conv2d",
            Box::new(|r| {
                let [n, c, h, w] = dims(r);
                let co = r.gen_range(1..4);
                primitive(r, &[(&[n, c, h, w], -1.0, 1.0), (&[co, c, 3, 3], -1.0, 1.0), (&[co], -1.0, 1.0)], |g, x| {
                    g.conv2d(x[0], x[1], Some(x[2]))
                })
            }),
        ),
        (
            "conv2d_1x1",
            Box::new(|r| {
                let [n, c, h, w] = dims(r);
                let co = r.gen_range(1..4);
                primitive(r, &[(&[n, c, h, w], -1.0, 1.0), (&[co, c, 1, 1], -1.0, 1.0)], |g, x| g.conv2d(x[0], x[1], None))
            }),
        ),
        (
            "batchnorm",
            Box::new(|r| {
                let s = dims(r);
                let c = s[1];
                primitive(
                    r,
                    &[(&s, -2.0, 2.0), (&[c], -1.0, 1.0), (&[c], 0.2, 2.0), (&[c], 0.5, 1.5), (&[c], -1.0, 1.0)],
                    |g, x| g.batchnorm(x[0], x[1], x[2], x[3], x[4], 1e-5),
                )
            }),
        ),
        (
            "batchnorm_train",
            Box::new(|r| {
                // statistics taken from the same input
                let s = dims(r);
                let c = s[1];
                primitive(r, &[(&s, -2.0, 2.0), (&[c], 0.5, 1.5), (&[c], -1.0, 1.0)], |g, x| {
                    let m = g.channel_mean(x[0]);
                    let v = g.channel_var(x[0]);
                    g.batchnorm(x[0], m, v, x[1], x[2], 1e-5)
                })
            }),
        ),
        ("softmax_channels", unary(-3.0, 3.0, Graph::softmax_channels)),
        (
            "rearrange",
            Box::new(|r| {
                let mut s = dims(r);
                s[1] = r.gen_range(2..5);
                let old = r.gen_range(1..s[1]);
                primitive(r, &[(&s, 0.0, 1.0)], move |g, x| g.rearrange(x[0], old))
            }),
        ),
        ("inversion_saa", inversion_case(AggregationKind::Saa)),
        ("inversion_avg", inversion_case(AggregationKind::Avg)),
        ("kd_loss", distill_case(|l| l.kd)),
        ("seg_loss", distill_case(|l| l.seg)),
        ("total_loss", distill_case(|l| l.total)),
    ]
}

#[derive(Debug, Clone)]
pub struct GradSummary {
    pub name: &'static str,
    pub checked: usize,
    pub excluded: usize,
    pub worst: f64,
}

pub fn run_grad_case(name: &'static str, build: &Builder) -> Result<GradSummary, String> {
    let mut s = GradSummary { name, checked: 0, excluded: 0, worst: 0.0 };
    for i in 0..GRAD_INSTANCES {
        let mut rng = stream(0x6772_6164, name, i);
        let c = build(&mut rng);
        let rep = grad_check(&c.graph, &c.binds, c.out, GRAD_EPS).map_err(|e| format!("{name} instance {i}: {e}"))?;
        if !(rep.max_rel_error < GRAD_TOL) {
            return Err(format!("{name} instance {i}: relative error {:.3e}", rep.max_rel_error));
        }
        s.checked += rep.checked;
        s.excluded += rep.excluded;
        s.worst = s.worst.max(rep.max_rel_error);
    }
    if s.checked == 0 {
        return Err(format!("{name}: no entry checked"));
    }
    Ok(s)
}

pub fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let cases = grad_cases();
    for (name, build) in &cases {
        worst = worst.max(run_grad_case(name, build)?.worst);
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("suite took {secs:.1}s"));
    }
    Ok(format!("{} cases x {GRAD_INSTANCES} instances, worst rel {worst:.2e}, {secs:.1}s", cases.len()))
}

// ---------------------------------------------------------------------- SAA

/// Random score maps of mixed character: uniform, peaked, near-binary and
/// smooth, with sizes up to 64x64.
pub fn random_map(rng: &mut Rng) -> (Vec<f64>, usize, usize, usize) {
    let c = rng.gen_range(1..4);
    let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
    let n = c * h * w;
    let style = rng.gen_range(0..4);
    let data = (0..n)
        .map(|i| match style {
            0 => rng.gen_range(0.0..1.0),
            1 => {
                if rng.gen_bool(0.02) {
                    rng.gen_range(0.8..1.0)
                } else {
                    rng.gen_range(0.0..0.05)
                }
            }
            2 => {
                if rng.gen_bool(0.5) {
                    1.0 - rng.gen_range(0.0..1e-3)
                } else {
                    rng.gen_range(0.0..1e-3)
                }
            }
            _ => 0.5 + 0.4 * ((i % w) as f64 * 0.3).sin() + rng.gen_range(-0.01..0.01),
        })
        .collect();
    (data, c, h, w)
}

/// Oracle: direct log of the mean of exponentials, no max shift.
fn direct_saa(plane: &[f64], r: f64) -> f64 {
    let s: f64 = plane.iter().map(|&v| (r * v).exp()).sum();
    (s / plane.len() as f64).ln() / r
}

pub fn saa_properties() -> Check {
    let mut rng = stream(0x5aa, "maps", 0);
    let mut max_shift_err = 0.0f64;
    let mut max_oracle_err = 0.0f64;
    for m in 0..1000 {
        let (data, c, h, w) = random_map(&mut rng);
        let planes = Planes::new(&data, c, h, w).unwrap();
        let mean = avg_pool(planes).unwrap().0;
        let max = max_pool(planes).unwrap().0;
        let shift = rng.gen_range(-3.0..3.0);
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let sp = Planes::new(&shifted, c, h, w).unwrap();
        let n = (h * w) as f64;
        let mut prev: Option<Vec<f64>> = None;
        for &r in &DEFAULT_R_SET {
            let y = saa_pool(planes, r).unwrap().0;
            let ys = saa_pool(sp, r).unwrap().0;
            for k in 0..c {
                if !(mean[k] <= y[k] && y[k] <= max[k]) {
                    return Err(format!("map {m} r {r} class {k}: {} <= {} <= {} violated", mean[k], y[k], max[k]));
                }
                if !(max[k] - y[k] <= n.ln() / r) {
                    return Err(format!("map {m} r {r} class {k}: gap {} > log(N)/r", max[k] - y[k]));
                }
                if let Some(p) = &prev {
                    if y[k] < p[k] {
                        return Err(format!("map {m} class {k}: decreases at r {r}"));
                    }
                }
                max_shift_err = max_shift_err.max((ys[k] - (y[k] + shift)).abs());
                let plane = &data[k * h * w..(k + 1) * h * w];
                max_oracle_err = max_oracle_err.max((direct_saa(plane, r) - y[k]).abs());
            }
            prev = Some(y);
        }
    }
    if max_shift_err > 1e-9 {
        return Err(format!("shift equivariance error {max_shift_err:.2e}"));
    }
    if max_oracle_err > 1e-12 {
        return Err(format!("direct evaluation differs by {max_oracle_err:.2e}"));
    }
    Ok(format!("1000 maps x 5 r, shift err {max_shift_err:.1e}, oracle err {max_oracle_err:.1e}"))
}

// ------------------------------------------------------ rearrange and merge

pub fn rearrange_conserves_mass() -> Check {
    let mut rng = stream(0x4ea, "rearrange", 0);
    let mut worst = 0.0f64;
    for m in 0..1000 {
        let classes = rng.gen_range(2..8);
        let old = rng.gen_range(1..=classes);
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let s = random_probs(&mut rng, classes, h, w);
        let r = probability_rearrange(&s, old).map_err(|e| e.to_string())?;
        if r.classes() != old {
            return Err(format!("map {m}: {} channels", r.classes()));
        }
        for p in 0..s.pixels() {
            let before: f64 = (0..classes).map(|c| s.get(c, p)).sum();
            let after: f64 = (0..old).map(|c| r.get(c, p)).sum();
            worst = worst.max((before - after).abs());
            for c in 1..old {
                if r.get(c, p).to_bits() != s.get(c, p).to_bits() {
                    return Err(format!("map {m}: old channel {c} changed"));
                }
            }
        }
        if old == classes && r.data() != s.data() {
            return Err(format!("map {m}: not the identity without new classes"));
        }
    }
    if worst > 1e-12 {
        return Err(format!("mass error {worst:.2e}"));
    }
    Ok(format!("1000 maps, mass err {worst:.1e}"))
}

/// Brute force: per pixel, concatenate the teacher column with the one-hot
/// of the new label over the new channels and take the last maximal index.
fn merge_oracle(teacher: &ScoreMap, labels: &LabelMap) -> Vec<u8> {
    let old = teacher.classes();
    let total = labels.classes();
    (0..teacher.pixels())
        .map(|p| {
            let mut column: Vec<f64> = (0..old).map(|c| teacher.get(c, p)).collect();
            let l = labels.labels()[p] as usize;
            column.extend((old..total).map(|c| if c == l { 1.0 } else { 0.0 }));
            let best = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            column.iter().rposition(|&v| v == best).unwrap() as u8
        })
        .collect()
}

/// Teacher column that is a softmax, one-hot, or a two-way tie.
fn teacher_column(rng: &mut Rng, old: usize) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => {
            let e: Vec<f64> = (0..old).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        1 => {
            let k = rng.gen_range(0..old);
            (0..old).map(|c| if c == k { 1.0 } else { 0.0 }).collect()
        }
        _ => {
            let a = rng.gen_range(0..old);
            let b = (a + 1) % old;
            let mut v = vec![0.0; old];
            v[a] += 0.5;
            v[b] += 0.5;
            v
        }
    }
}

pub fn merge_matches_oracle() -> Check {
    let mut rng = stream(0x3e6, "merge", 0);
    let mut ties = 0;
    for m in 0..200 {
        let old = rng.gen_range(1..5);
        let total = old + rng.gen_range(0..3);
        let (h, w) = (4, 4);
        let mut data = vec![0.0; old * h * w];
        for p in 0..h * w {
            for (c, v) in teacher_column(&mut rng, old).into_iter().enumerate() {
                data[c * h * w + p] = v;
            }
        }
        let teacher = ScoreMap::new(old, h, w, data).unwrap();
        let labels: Vec<u8> = (0..h * w)
            .map(|_| if total > old && rng.gen_bool(0.4) { rng.gen_range(old..total) as u8 } else { 0 })
            .collect();
        let ignore: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.1)).collect();
        let lm = LabelMap::new(total, h, w, labels).unwrap().with_ignore(ignore.clone()).unwrap();
        let merged = label_merge(&teacher, &lm).map_err(|e| format!("instance {m}: {e}"))?;
        let expect = merge_oracle(&teacher, &lm);
        if merged.labels() != &expect[..] {
            return Err(format!("instance {m}: {:?} vs oracle {:?}", merged.labels(), expect));
        }
        if merged.ignore_mask() != &ignore[..] {
            return Err(format!("instance {m}: ignore mask not carried"));
        }
        ties += (0..h * w)
            .filter(|&p| {
                let vals: Vec<f64> = (0..old).map(|c| teacher.get(c, p)).collect();
                let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                vals.iter().filter(|&&v| v == best).count() > 1 || (best == 1.0 && lm.labels()[p] != 0)
            })
            .count();
    }
    Ok(format!("200 instances, {ties} tied pixels"))
}
