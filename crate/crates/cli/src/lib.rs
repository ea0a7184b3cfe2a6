//! Command implementations behind the `hrhf` binary.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hrhf_core::aggregation::AggregationKind;
use hrhf_core::dataset::{generate_scenes, split_incremental, DatasetConfig, Scene, SplitMode, StepSpec};
use hrhf_core::inversion::{draw_targets, invert, FakeSample};
use hrhf_core::persist::{
    encode_pgm, encode_ppm, load_checkpoint, loss_csv, metrics_csv, save_checkpoint, write_atomic, write_json,
    Checkpoint, Stamp,
};
use hrhf_core::protocol::{config_hash, evaluate, run_from, train_step0, Method, ProtocolConfig, RunPlan, StepMetrics};
use hrhf_core::rng::stream;
use hrhf_core::Error;

/// Everything a run needs, as one JSON document. Missing keys take defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Step layout such as `"3-1"` or `"3-1-1-1"`.
    pub protocol: String,
    pub split: SplitMode,
    pub method: Method,
    pub training: ProtocolConfig,
    pub invert: InvertConfig,
    pub ablate: AblateConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            protocol: "3-1".into(),
            split: SplitMode::Disjoint,
            method: Method::Hrhf,
            training: ProtocolConfig::default(),
            invert: InvertConfig::default(),
            ablate: AblateConfig::default(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvertConfig {
    /// Samples produced by `invert`.
    pub count: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig { count: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// SAA against AVG and MAX pooling.
    Aggregation,
    /// Each fixed temperature, then random draws.
    RSweep,
    /// Real:fake mini-batch ratios.
    Ratio,
    /// Distillation weight on and off.
    Lambda,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Aggregation => "aggregation",
            Study::RSweep => "r_sweep",
            Study::Ratio => "ratio",
            Study::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub study: Study,
    pub ratios: Vec<[u32; 2]>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            study: Study::RSweep,
            ratios: vec![[1, 1], [1, 2], [2, 1]],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: Error| CliError::Config(e.to_string());
        self.dataset.validate().map_err(cfg)?;
        self.training.validate().map_err(cfg)?;
        self.spec()?;
        if self.training.inversion.height != self.dataset.canvas || self.training.inversion.width != self.dataset.canvas {
            return Err(CliError::Config("inversion resolution must equal the dataset canvas".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<StepSpec, CliError> {
        StepSpec::protocol(&self.protocol, self.split).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            config_hash: config_hash(self),
            seed: self.seed,
        }
    }

    pub fn plan(&self, method: Method) -> Result<RunPlan, CliError> {
        Ok(RunPlan {
            spec: self.spec()?,
            method,
            config: self.training.clone(),
            seed: self.seed,
        })
    }

    pub fn scenes(&self) -> Result<(Vec<Scene>, Vec<Scene>), CliError> {
        let universe = self.spec()?.universe();
        let d = &self.dataset;
        Ok((
            generate_scenes(d, &universe, d.train_scenes, self.seed, "train")?,
            generate_scenes(d, &universe, d.test_scenes, self.seed, "test")?,
        ))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing file: {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Core(Error::io(path, e))
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(Error::Io { source, .. }) if source.kind() == ErrorKind::NotFound => 3,
            CliError::Core(Error::Version { .. }) => 4,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "missing_file",
            4 => "version_mismatch",
            _ => "error",
        }
    }

    /// Machine-readable record printed on stderr.
    pub fn record(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn emit_config(cfg: &RunConfig) -> CliResult<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        stamp: Stamp,
        config: &'a RunConfig,
    }
    write_json(&cfg.out.join("config.json"), &Resolved { stamp: cfg.stamp(), config: cfg })?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SceneEntry {
    image: String,
    labels: String,
    classes: Vec<u8>,
    instances: Vec<hrhf_core::dataset::Instance>,
    /// Learning step whose training set holds the scene (train only).
    step: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    stamp: Stamp,
    spec: StepSpec,
    train: Vec<SceneEntry>,
    test: Vec<SceneEntry>,
}

fn dump_scenes(dir: &Path, scenes: &[Scene], steps: Option<&[Option<usize>]>, stamp: &Stamp) -> CliResult<Vec<SceneEntry>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let image = format!("scene_{i:04}.ppm");
            let labels = format!("scene_{i:04}.pgm");
            write_atomic(&dir.join(&image), &encode_ppm(&s.image, stamp)?)?;
            write_atomic(&dir.join(&labels), &encode_pgm(&s.labels, s.height, s.width, stamp)?)?;
            Ok(SceneEntry {
                image,
                labels,
                classes: s.present_classes().into_iter().collect(),
                instances: s.instances.clone(),
                step: steps.and_then(|v| v[i]),
            })
        })
        .collect()
}

/// Writes train and test scenes as PPM + PGM pairs with a JSON manifest.
pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.validate()?;
    emit_config(cfg)?;
    let stamp = cfg.stamp();
    let spec = cfg.spec()?;
    let (train, test) = cfg.scenes()?;
    let mut step_of = vec![None; train.len()];
    for (step, idx) in split_incremental(&train, &spec)?.iter().enumerate() {
        for &i in idx {
            step_of[i] = Some(step);
        }
    }
    let dir = cfg.out.join("data");
    let manifest = Manifest {
        train: dump_scenes(&dir.join("train"), &train, Some(&step_of), &stamp)?,
        test: dump_scenes(&dir.join("test"), &test, None, &stamp)?,
        stamp,
        spec,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

#[derive(Debug, Serialize)]
struct FakeRecord<'a> {
    stamp: &'a Stamp,
    image: String,
    coverage: f64,
    #[serde(flatten)]
    sample: &'a FakeSample,
}

fn dump_fakes(dir: &Path, fakes: &[FakeSample], stamp: &Stamp) -> CliResult<()> {
    let mut index = Vec::with_capacity(fakes.len());
    for (i, f) in fakes.iter().enumerate() {
        let image = format!("fake_{i:04}.ppm");
        write_atomic(&dir.join(&image), &encode_ppm(&f.image, stamp)?)?;
        let rec = FakeRecord { stamp, image, coverage: f.coverage(), sample: f };
        write_json(&dir.join(format!("fake_{i:04}.json")), &rec)?;
        index.push(rec);
    }
    write_json(&dir.join("fakes.json"), &index)?;
    Ok(())
}

/// Trains every step of the configured method; writes one checkpoint per
/// step, the metrics report, the loss curve and any fakes.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.validate()?;
    emit_config(cfg)?;
    let stamp = cfg.stamp();
    let plan = cfg.plan(cfg.method)?;
    let (train, test) = cfg.scenes()?;
    let initial = train_step0(&plan, &train)?;
    let mut out = run_from(&plan, initial, &train, &test)?;
    out.report.config_hash = stamp.config_hash.clone();
    let dir = cfg.out.join("train").join(cfg.method.name());
    let universe = plan.spec.universe();
    for m in &out.models {
        let classes = m.classes();
        let ck = Checkpoint {
            model: m.clone(),
            universe: universe[..classes - 1].to_vec(),
            stamp: stamp.clone(),
        };
        save_checkpoint(&dir.join(format!("step{}.ckpt", m.step)), &ck)?;
    }
    for (i, fakes) in out.fakes.iter().enumerate().filter(|(_, f)| !f.is_empty()) {
        dump_fakes(&dir.join(format!("fakes_step{}", i + 1)), fakes, &stamp)?;
    }
    write_json(&dir.join("report.json"), &out.report)?;
    write_json(&dir.join("failures.json"), &out.failures)?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&out.report).as_bytes())?;
    write_atomic(&dir.join("loss.csv"), loss_csv(&out.curve, &stamp).as_bytes())?;
    Ok(dir)
}

fn check_universe(ck: &Checkpoint, spec: &StepSpec) -> CliResult<()> {
    let universe = spec.universe();
    if ck.model.step >= spec.num_steps()
        || ck.model.classes() != spec.channels_through(ck.model.step)
        || universe[..ck.universe.len()] != ck.universe[..]
    {
        return Err(CliError::Config(format!(
            "checkpoint classes {:?} at step {} do not fit protocol {}",
            ck.universe, ck.model.step, spec.universe().len()
        )));
    }
    Ok(())
}

/// Inverts a checkpoint into `invert.count` fake samples.
pub fn cmd_invert(cfg: &RunConfig, checkpoint: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    check_universe(&ck, &cfg.spec()?)?;
    emit_config(cfg)?;
    let stamp = cfg.stamp();
    let mut rng = stream(cfg.seed, "invert", ck.model.step as u64);
    let targets = draw_targets(
        &mut rng,
        ck.model.classes(),
        cfg.invert.count,
        &cfg.training.inversion.targets_per_image,
    )?;
    let out = invert(&ck.model, &targets, &cfg.training.inversion, &mut rng)?;
    let dir = cfg.out.join("invert");
    dump_fakes(&dir, &out.samples, &stamp)?;
    write_json(&dir.join("failures.json"), &out.failures)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
pub struct EvalRecord {
    pub stamp: Stamp,
    pub checkpoint: Stamp,
    pub metrics: StepMetrics,
}

/// Evaluates a checkpoint on the configured test scenes.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<(PathBuf, StepMetrics)> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let spec = cfg.spec()?;
    check_universe(&ck, &spec)?;
    emit_config(cfg)?;
    let (_, test) = cfg.scenes()?;
    let metrics = evaluate(&ck.model, &test, &spec, ck.model.step)?;
    let path = cfg.out.join("eval").join("report.json");
    write_json(
        &path,
        &EvalRecord {
            stamp: cfg.stamp(),
            checkpoint: ck.stamp,
            metrics: metrics.clone(),
        },
    )?;
    Ok((path, metrics))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub old_miou: Option<f64>,
    pub new_miou: Option<f64>,
    pub all_miou: Option<f64>,
    /// Mean fake coverage over the run, when fakes were made.
    pub coverage: Option<f64>,
}

fn variants(cfg: &RunConfig) -> Vec<(String, Method, ProtocolConfig)> {
    let base = &cfg.training;
    let with = |f: &dyn Fn(&mut ProtocolConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match cfg.ablate.study {
        Study::Aggregation => [("saa", AggregationKind::Saa), ("avg", AggregationKind::Avg), ("max", AggregationKind::Max)]
            .into_iter()
            .map(|(name, kind)| (name.to_string(), Method::Hrhf, with(&|c| c.inversion.aggregation.kind = kind)))
            .collect(),
        Study::RSweep => {
            let mut rows: Vec<_> = base
                .inversion
                .aggregation
                .r_set
                .iter()
                .map(|&r| (format!("r={r}"), Method::Hrhf, with(&|c| c.inversion.aggregation.fixed_r = Some(r))))
                .collect();
            rows.push(("random".into(), Method::Hrhf, with(&|c| c.inversion.aggregation.fixed_r = None)));
            rows
        }
        Study::Ratio => cfg
            .ablate
            .ratios
            .iter()
            .map(|&ratio| (format!("{}:{}", ratio[0], ratio[1]), Method::Hrhf, with(&|c| c.incremental.ratio = ratio)))
            .collect(),
        Study::Lambda => vec![
            ("kd".into(), Method::Hrhf, base.clone()),
            ("no_kd".into(), Method::HrhfNoKd, base.clone()),
        ],
    }
}

/// Runs one study; all variants share the step-0 model.
pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<(PathBuf, Vec<AblationRow>)> {
    cfg.validate()?;
    for (_, _, c) in variants(cfg) {
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    emit_config(cfg)?;
    let stamp = cfg.stamp();
    let (train, test) = cfg.scenes()?;
    let initial = train_step0(&cfg.plan(cfg.method)?, &train)?;
    let mut rows = Vec::new();
    for (variant, method, config) in variants(cfg) {
        let plan = RunPlan { config, ..cfg.plan(method)? };
        let out = run_from(&plan, initial.clone(), &train, &test)?;
        let cov: Vec<f64> = out.fakes.iter().flatten().map(FakeSample::coverage).collect();
        let last = out.report.last();
        rows.push(AblationRow {
            variant,
            old_miou: last.old_miou,
            new_miou: last.new_miou,
            all_miou: last.all_miou,
            coverage: (!cov.is_empty()).then(|| cov.iter().sum::<f64>() / cov.len() as f64),
        });
    }
    let dir = cfg.out.join("ablate");
    let name = cfg.ablate.study.name();
    #[derive(Serialize)]
    struct Table<'a> {
        stamp: &'a Stamp,
        study: Study,
        rows: &'a [AblationRow],
    }
    write_json(&dir.join(format!("{name}.json")), &Table { stamp: &stamp, study: cfg.ablate.study, rows: &rows })?;
    let cell = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut csv = format!("# config {} seed {}\nvariant,old_miou,new_miou,all_miou,coverage\n", stamp.config_hash, stamp.seed);
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant,
            cell(r.old_miou),
            cell(r.new_miou),
            cell(r.all_miou),
            cell(r.coverage)
        ));
    }
    write_atomic(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
    Ok((dir, rows))
}
