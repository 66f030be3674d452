//! Staged training: H2H, then the catalyst network with H2H frozen, then the I2I dehazer
//! with both upstream stages frozen. Each stage is checkpointed at its boundary and every
//! `checkpoint_every` steps; losses are appended to `losses.jsonl`.
//!
//! Batches are drawn from a seed derived from `(seed, stage, step)`, so a resumed run
//! replays exactly the batches an uninterrupted run would have seen.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use skygan_nn::{Adam, AdamConfig, Checkpoint, Module, NnError, ParamSet, ResNet, Tensor, UNet};

use crate::color::span_channels;
use crate::error::{Error, Result};
use crate::h2h::{train_h2h_step, H2HBatch, H2HBundle, H2HOptim, H2HSpec, H2HWeights, LossReport};
use crate::haze::{manifest_root, DatasetManifest};
use crate::hsc::{fit_hsc_step, CatalystNet, CatalystSpec};
use crate::i2i::{assemble_i2i_input, train_i2i_step, I2IBundle, I2IOptim, I2IReport, I2ISpec, Pipeline};
use crate::image::{DatasetPair, ImageTensor};
use crate::seed::{derive_seed, rng};
use crate::spectral::{load_cube_dir, make_spectral_fixtures};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_LOG: &str = "losses.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    H2h,
    Hsc,
    I2i,
}

impl StageName {
    pub const ALL: [StageName; 3] = [StageName::H2h, StageName::Hsc, StageName::I2i];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::H2h => "h2h",
            StageName::Hsc => "hsc",
            StageName::I2i => "i2i",
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.ckpt", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralSource {
    /// Generated cubes at the dataset's tile size.
    Fixtures { seed: u64, count: usize },
    /// Directory of `.hsc` cube files.
    CubeDir(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { steps: 1000, batch_size: 4, lr: 2e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub h2h: H2HSpec,
    pub hsc: CatalystSpec,
    pub i2i: I2ISpec,
}

fn default_l1() -> f64 {
    100.0
}

fn default_stages() -> Vec<StageName> {
    StageName::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub spectral: SpectralSource,
    #[serde(default = "default_stages")]
    pub stages: Vec<StageName>,
    #[serde(default)]
    pub h2h: StageConfig,
    #[serde(default)]
    pub hsc: StageConfig,
    #[serde(default)]
    pub i2i: StageConfig,
    #[serde(default)]
    pub weights: H2HWeights,
    #[serde(default = "default_l1")]
    pub lambda_l1: f64,
    #[serde(default)]
    pub networks: NetworkConfig,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Intermediate checkpoint period in steps; 0 saves only at stage boundaries.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Use only the first `max_pairs` manifest entries.
    #[serde(default)]
    pub max_pairs: Option<usize>,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>, spectral: SpectralSource, checkpoint_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            manifest: manifest.into(),
            spectral,
            stages: default_stages(),
            h2h: StageConfig::default(),
            hsc: StageConfig::default(),
            i2i: StageConfig::default(),
            weights: H2HWeights::default(),
            lambda_l1: default_l1(),
            networks: NetworkConfig::default(),
            seed: 0,
            checkpoint_dir: checkpoint_dir.into(),
            checkpoint_every: 0,
            max_pairs: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("config serializes")).map_err(|e| Error::io(path, e))
    }

    pub fn stage(&self, s: StageName) -> &StageConfig {
        match s {
            StageName::H2h => &self.h2h,
            StageName::Hsc => &self.hsc,
            StageName::I2i => &self.i2i,
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn multiple(&self) -> usize {
        self.networks.h2h.multiple().max(self.networks.i2i.multiple())
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = None;
        for &s in &self.stages {
            if last.is_some_and(|l| l >= s) {
                return Err(Error::Config(format!(
                    "stages must be an ordered subset of [h2h, hsc, i2i], got {:?}",
                    self.stages.iter().map(|s| s.as_str()).collect::<Vec<_>>()
                )));
            }
            last = Some(s);
            if self.stage(s).batch_size == 0 {
                return Err(Error::Config(format!("{}: batch_size must be positive", s.as_str())));
            }
            let lr = self.stage(s).lr;
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{}: invalid learning rate {lr}", s.as_str())));
            }
        }
        if !self.manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", self.manifest.display())));
        }
        match &self.spectral {
            SpectralSource::CubeDir(d) if !d.is_dir() => {
                return Err(Error::Config(format!("cube directory {} does not exist", d.display())))
            }
            SpectralSource::Fixtures { count: 0, .. } => {
                return Err(Error::Config("fixture count must be at least 1".into()))
            }
            _ => {}
        }
        let n = &self.networks;
        if n.h2h.depth == 0 || n.i2i.depth == 0 || n.h2h.base_width == 0 || n.i2i.base_width == 0 {
            return Err(Error::Config("generator depth and width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HscReport {
    pub step: u64,
    pub l_r: f64,
}

/// Loss rows produced by one `train`/`resume` invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub h2h: Vec<LossReport>,
    pub hsc: Vec<HscReport>,
    pub i2i: Vec<I2IReport>,
}

fn ckpt_err(path: &Path) -> impl Fn(NnError) -> Error + '_ {
    move |e| match e {
        NnError::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Checkpoint { path: path.to_path_buf(), message: other.to_string() },
    }
}

fn put_adam(ckpt: &mut Checkpoint, prefix: &str, adam: &Adam<f32>) {
    for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        ckpt.put(format!("{prefix}.m{i}"), m);
        ckpt.put(format!("{prefix}.v{i}"), v);
    }
    ckpt.meta["adam"][prefix] = json!(adam.step);
}

fn load_adam(ckpt: &Checkpoint, path: &Path, prefix: &str, adam: &mut Adam<f32>) -> Result<()> {
    for i in 0..adam.m.len() {
        adam.m[i] = ckpt.get(&format!("{prefix}.m{i}")).map_err(ckpt_err(path))?;
        adam.v[i] = ckpt.get(&format!("{prefix}.v{i}")).map_err(ckpt_err(path))?;
    }
    adam.step = ckpt.meta["adam"][prefix]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint { path: path.to_path_buf(), message: format!("missing step of `{prefix}`") })?;
    Ok(())
}

/// Stage position stored in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageState {
    pub step: u64,
    pub complete: bool,
}

fn read_checkpoint(path: &Path, kind: StageName, spec: &Value) -> Result<(Checkpoint, StageState)> {
    let ckpt = Checkpoint::load(path).map_err(ckpt_err(path))?;
    let bad = |m: &str| Error::Checkpoint { path: path.to_path_buf(), message: m.to_string() };
    if ckpt.meta["kind"] != kind.as_str() {
        return Err(bad(&format!("expected a {} checkpoint, found {}", kind.as_str(), ckpt.meta["kind"])));
    }
    if &ckpt.meta["spec"] != spec {
        return Err(Error::SpecMismatch {
            path: path.to_path_buf(),
            message: format!("stored spec {} differs from configured {}", ckpt.meta["spec"], spec),
        });
    }
    let step = ckpt.meta["step"].as_u64().ok_or_else(|| bad("missing step"))?;
    let complete = ckpt.meta["complete"].as_bool().ok_or_else(|| bad("missing completion flag"))?;
    Ok((ckpt, StageState { step, complete }))
}

fn meta(kind: StageName, spec: Value, state: StageState) -> Value {
    json!({ "kind": kind.as_str(), "spec": spec, "step": state.step, "complete": state.complete, "adam": {} })
}

fn spec_value(config: &RunConfig, s: StageName) -> Value {
    let n = &config.networks;
    match s {
        StageName::H2h => json!({ "net": n.h2h, "weights": config.weights }),
        StageName::Hsc => json!({ "net": n.hsc }),
        StageName::I2i => json!({ "net": n.i2i, "lambda_l1": config.lambda_l1 }),
    }
}

fn save_h2h(path: &Path, config: &RunConfig, b: &H2HBundle<f32>, o: &H2HOptim<f32>, st: StageState) -> Result<()> {
    let mut c = Checkpoint::new(meta(StageName::H2h, spec_value(config, StageName::H2h), st));
    c.put_params("gx", b.gx.params());
    c.put_params("gh", b.gh.params());
    c.put_params("dx", b.dx.params());
    c.put_params("dh", b.dh.params());
    c.put_params("cls", b.cls.params());
    put_adam(&mut c, "opt_gx", &o.gx);
    put_adam(&mut c, "opt_gh", &o.gh);
    put_adam(&mut c, "opt_dx", &o.dx);
    put_adam(&mut c, "opt_dh", &o.dh);
    put_adam(&mut c, "opt_cls", &o.cls);
    c.save(path).map_err(ckpt_err(path))
}

fn load_h2h(path: &Path, c: &Checkpoint, b: &mut H2HBundle<f32>, o: &mut H2HOptim<f32>) -> Result<()> {
    let e = ckpt_err(path);
    c.load_params("gx", b.gx.params_mut()).map_err(&e)?;
    c.load_params("gh", b.gh.params_mut()).map_err(&e)?;
    c.load_params("dx", b.dx.params_mut()).map_err(&e)?;
    c.load_params("dh", b.dh.params_mut()).map_err(&e)?;
    c.load_params("cls", b.cls.params_mut()).map_err(&e)?;
    load_adam(c, path, "opt_gx", &mut o.gx)?;
    load_adam(c, path, "opt_gh", &mut o.gh)?;
    load_adam(c, path, "opt_dx", &mut o.dx)?;
    load_adam(c, path, "opt_dh", &mut o.dh)?;
    load_adam(c, path, "opt_cls", &mut o.cls)
}

fn save_hsc(path: &Path, config: &RunConfig, n: &CatalystNet<f32>, o: &Adam<f32>, st: StageState) -> Result<()> {
    let mut c = Checkpoint::new(meta(StageName::Hsc, spec_value(config, StageName::Hsc), st));
    c.put_params("gr", n.net.params());
    put_adam(&mut c, "opt_gr", o);
    c.save(path).map_err(ckpt_err(path))
}

fn load_hsc(path: &Path, c: &Checkpoint, n: &mut CatalystNet<f32>, o: &mut Adam<f32>) -> Result<()> {
    c.load_params("gr", n.net.params_mut()).map_err(ckpt_err(path))?;
    load_adam(c, path, "opt_gr", o)
}

fn save_i2i(path: &Path, config: &RunConfig, b: &I2IBundle<f32>, o: &I2IOptim<f32>, st: StageState) -> Result<()> {
    let mut c = Checkpoint::new(meta(StageName::I2i, spec_value(config, StageName::I2i), st));
    c.put_params("gz", b.gz.params());
    c.put_params("dz", b.dz.params());
    put_adam(&mut c, "opt_gz", &o.gz);
    put_adam(&mut c, "opt_dz", &o.dz);
    c.save(path).map_err(ckpt_err(path))
}

fn load_i2i(path: &Path, c: &Checkpoint, b: &mut I2IBundle<f32>, o: &mut I2IOptim<f32>) -> Result<()> {
    let e = ckpt_err(path);
    c.load_params("gz", b.gz.params_mut()).map_err(&e)?;
    c.load_params("dz", b.dz.params_mut()).map_err(&e)?;
    load_adam(c, path, "opt_gz", &mut o.gz)?;
    load_adam(c, path, "opt_dz", &mut o.dz)
}

/// Indices of one batch: `k` distinct indices out of `n` (all of them when `k >= n`).
pub fn batch_indices(seed: u64, stage: StageName, stream: &str, step: u64, n: usize, k: usize) -> Vec<usize> {
    let mut r = rng(derive_seed(seed, &["batch".into(), stage.as_str().into(), stream.into(), step.into()]));
    sample(&mut r, n, k.min(n)).into_vec()
}

fn stack(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = idx.iter().map(|&i| items[i].clone()).collect();
    Tensor::stack_batch(&parts).map_err(|e| Error::dim("batch", e.to_string()))
}

struct Data {
    hazy: Vec<ImageTensor>,
    x_spanned: Vec<Tensor<f32>>,
    y: Vec<Tensor<f32>>,
    cubes: Vec<Tensor<f32>>,
}

fn load_data(config: &RunConfig) -> Result<Data> {
    let manifest = DatasetManifest::load(&config.manifest)?;
    let mut pairs: Vec<DatasetPair> = manifest.load_pairs(&manifest_root(&config.manifest))?;
    if let Some(m) = config.max_pairs {
        pairs.truncate(m);
    }
    let first = pairs.first().ok_or_else(|| Error::Dataset("manifest lists no pairs".into()))?;
    let (h, w) = (first.hazy.height(), first.hazy.width());
    if pairs.iter().any(|p| (p.hazy.height(), p.hazy.width()) != (h, w)) {
        return Err(Error::Dataset("training pairs must share one tile size".into()));
    }
    let m = config.multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::dim("training data", format!("tile {h}x{w} is not divisible by {m}")));
    }
    let cubes: Vec<ImageTensor> = match &config.spectral {
        SpectralSource::Fixtures { seed, count } => {
            make_spectral_fixtures(*count, h, w, *seed)?.into_iter().map(|f| f.cube).collect()
        }
        SpectralSource::CubeDir(dir) => load_cube_dir(dir)?,
    };
    if cubes.is_empty() {
        return Err(Error::Dataset("no spectral cubes available".into()));
    }
    if cubes.iter().any(|c| (c.height(), c.width()) != (h, w)) {
        return Err(Error::Dataset(format!("spectral cubes must be {h}x{w} to match the training tiles")));
    }
    let x_spanned = pairs.iter().map(|p| Ok(span_channels(&p.hazy)?.to_tensor())).collect::<Result<_>>()?;
    Ok(Data {
        y: pairs.iter().map(|p| p.clean.to_tensor()).collect(),
        hazy: pairs.into_iter().map(|p| p.hazy).collect(),
        x_spanned,
        cubes: cubes.iter().map(|c| c.to_tensor()).collect(),
    })
}

struct LossLog {
    path: PathBuf,
}

impl LossLog {
    /// Keeps only rows for which `keep(stage, step)` holds.
    fn retain(&self, keep: impl Fn(&str, u64) -> bool) -> Result<()> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        let mut out = String::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| Error::Format { path: self.path.clone(), message: e.to_string() })?;
            if keep(v["stage"].as_str().unwrap_or(""), v["step"].as_u64().unwrap_or(0)) {
                out.push_str(line);
                out.push('\n');
            }
        }
        fs::write(&self.path, out).map_err(|e| Error::io(&self.path, e))
    }

    fn append(&self, stage: StageName, row: &impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(row).expect("row serializes");
        v["stage"] = json!(stage.as_str());
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{v}").map_err(|e| Error::io(&self.path, e))
    }
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig { lr, ..AdamConfig::default() }
}

/// Loads a stage checkpoint if present. Returns `None` when the file does not exist.
fn existing<F>(dir: &Path, s: StageName, config: &RunConfig, load: F) -> Result<Option<StageState>>
where
    F: FnOnce(&Path, &Checkpoint) -> Result<()>,
{
    let path = dir.join(s.checkpoint_file());
    if !path.exists() {
        return Ok(None);
    }
    let (ckpt, state) = read_checkpoint(&path, s, &spec_value(config, s))?;
    load(&path, &ckpt)?;
    Ok(Some(state))
}

fn should_save(config: &RunConfig, done: u64, total: u64) -> bool {
    config.checkpoint_every > 0 && done.is_multiple_of(config.checkpoint_every) && done < total
}

fn run(config: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = &config.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = load_data(config)?;
    let log = LossLog { path: dir.join(LOSS_LOG) };
    if !resume {
        for s in &config.stages {
            let p = dir.join(s.checkpoint_file());
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let stages = config.stages.clone();
        log.retain(|stage, _| !stages.iter().any(|s| s.as_str() == stage))?;
    }
    config.save(&dir.join(CONFIG_FILE))?;

    let mut out = TrainOutcome::default();
    let n = data.hazy.len();
    let needs = |s: StageName| config.stages.iter().any(|&t| t >= s);
    let trains = |s: StageName| config.stages.contains(&s);
    let seed = config.seed;
    let mut upstream_changed = false;

    // H2H
    let mut h2h = H2HBundle::<f32>::new(config.networks.h2h, config.weights, seed);
    if needs(StageName::H2h) {
        let s = StageName::H2h;
        let cfg = *config.stage(s);
        let path = dir.join(s.checkpoint_file());
        let mut opt = H2HOptim::new(adam(cfg.lr), &h2h);
        let state = existing(dir, s, config, |p, c| load_h2h(p, c, &mut h2h, &mut opt))?;
        if trains(s) {
            let start = resume_step(state, cfg.steps);
            upstream_changed |= start < cfg.steps;
            log.retain(|stage, step| stage != s.as_str() || step < start)?;
            for step in start..cfg.steps {
                let idx = batch_indices(seed, s, "pairs", step, n, cfg.batch_size);
                let hdx = batch_indices(seed, s, "cubes", step, data.cubes.len(), cfg.batch_size);
                let batch = H2HBatch {
                    x_spanned: stack(&data.x_spanned, &idx)?,
                    y_clean: stack(&data.y, &idx)?,
                    h: stack(&data.cubes, &hdx)?,
                };
                let r = train_h2h_step(&mut h2h, &mut opt, &batch, step)?;
                log.append(s, &r)?;
                out.h2h.push(r);
                if should_save(config, step + 1, cfg.steps) {
                    save_h2h(&path, config, &h2h, &opt, StageState { step: step + 1, complete: false })?;
                }
            }
            if start < cfg.steps || state.is_none() {
                save_h2h(&path, config, &h2h, &opt, StageState { step: cfg.steps, complete: true })?;
            }
            out.checkpoints.push(path);
        } else if state.is_none() {
            return Err(missing_upstream(&path));
        }
    }

    // HSC, on cubes reconstructed once by the frozen G_x.
    let mut hsc = CatalystNet::<f32>::new(config.networks.hsc, seed);
    if needs(StageName::Hsc) {
        let s = StageName::Hsc;
        let cfg = *config.stage(s);
        let path = dir.join(s.checkpoint_file());
        let mut opt = Adam::new(adam(cfg.lr), hsc.net.params());
        if upstream_changed && trains(s) {
            invalidate(dir, s)?;
        }
        let state = existing(dir, s, config, |p, c| load_hsc(p, c, &mut hsc, &mut opt))?;
        if trains(s) {
            let start = resume_step(state, cfg.steps);
            upstream_changed |= start < cfg.steps;
            log.retain(|stage, step| stage != s.as_str() || step < start)?;
            let cubes: Vec<Tensor<f32>> = data.x_spanned.iter().map(|x| clamp01(h2h.gx.infer(x))).collect();
            for step in start..cfg.steps {
                let idx = batch_indices(seed, s, "pairs", step, n, cfg.batch_size);
                let l_r = fit_hsc_step(&mut hsc, &mut opt, &stack(&cubes, &idx)?, &stack(&data.y, &idx)?, step)?;
                let r = HscReport { step, l_r };
                log.append(s, &r)?;
                out.hsc.push(r);
                if should_save(config, step + 1, cfg.steps) {
                    save_hsc(&path, config, &hsc, &opt, StageState { step: step + 1, complete: false })?;
                }
            }
            if start < cfg.steps || state.is_none() {
                save_hsc(&path, config, &hsc, &opt, StageState { step: cfg.steps, complete: true })?;
            }
            out.checkpoints.push(path);
        } else if state.is_none() {
            return Err(missing_upstream(&path));
        }
    }

    // I2I, on inputs assembled once from the frozen upstream networks.
    if trains(StageName::I2i) {
        let s = StageName::I2i;
        let cfg = *config.stage(s);
        let path = dir.join(s.checkpoint_file());
        let mut i2i = I2IBundle::<f32>::new(config.networks.i2i, config.lambda_l1, seed);
        let mut opt = I2IOptim::new(adam(cfg.lr), &i2i);
        if upstream_changed {
            invalidate(dir, s)?;
        }
        let state = existing(dir, s, config, |p, c| load_i2i(p, c, &mut i2i, &mut opt))?;
        let start = resume_step(state, cfg.steps);
        log.retain(|stage, step| stage != s.as_str() || step < start)?;
        let inputs: Vec<Tensor<f32>> = data
            .hazy
            .iter()
            .zip(&data.x_spanned)
            .map(|(hazy, xs)| {
                let cube = clamp01(h2h.gx.infer(xs));
                let cat = ImageTensor::from_tensor(&hsc.net.infer(&cube), 0)?;
                Ok(assemble_i2i_input(hazy, &cat)?.to_tensor())
            })
            .collect::<Result<_>>()?;
        for step in start..cfg.steps {
            let idx = batch_indices(seed, s, "pairs", step, n, cfg.batch_size);
            let r = train_i2i_step(&mut i2i, &mut opt, &stack(&inputs, &idx)?, &stack(&data.y, &idx)?, step)?;
            log.append(s, &r)?;
            out.i2i.push(r);
            if should_save(config, step + 1, cfg.steps) {
                save_i2i(&path, config, &i2i, &opt, StageState { step: step + 1, complete: false })?;
            }
        }
        if start < cfg.steps || state.is_none() {
            save_i2i(&path, config, &i2i, &opt, StageState { step: cfg.steps, complete: true })?;
        }
        out.checkpoints.push(path);
    }
    Ok(out)
}

/// First step to run. A finished stage whose step count was raised continues training.
fn resume_step(state: Option<StageState>, steps: u64) -> u64 {
    state.map_or(0, |st| st.step.min(steps))
}

/// Drops a downstream checkpoint trained against an upstream network that has since changed.
fn invalidate(dir: &Path, s: StageName) -> Result<()> {
    let p = dir.join(s.checkpoint_file());
    if p.exists() {
        log::info!("{}: upstream stage changed, retraining from scratch", p.display());
        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn clamp01(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn missing_upstream(path: &Path) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: "upstream stage is not in the stage list and has no checkpoint".into(),
    }
}

/// Trains the configured stages from scratch, replacing their checkpoints.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    run(config, false)
}

/// Continues the run stored in `dir` from its latest checkpoints.
pub fn resume(dir: &Path) -> Result<TrainOutcome> {
    let path = dir.join(CONFIG_FILE);
    if !path.is_file() {
        return Err(Error::Checkpoint { path, message: "run configuration not found".into() });
    }
    let mut config = RunConfig::load(&path)?;
    config.checkpoint_dir = dir.to_path_buf();
    run(&config, true)
}

/// Continues training with an explicit configuration; stored checkpoints must match its
/// network specs.
pub fn resume_with(config: &RunConfig) -> Result<TrainOutcome> {
    run(config, true)
}

/// Frozen inference networks of a trained run.
#[derive(Debug, Clone)]
pub struct DehazeModel {
    pub gx: UNet<f32>,
    pub gr: ResNet<f32>,
    pub gz: UNet<f32>,
    pub multiple: usize,
}

impl DehazeModel {
    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline { gx: &self.gx, gr: &self.gr, gz: &self.gz, multiple: self.multiple }
    }
}

fn params_with_prefix(c: &Checkpoint, path: &Path, prefix: &str, template: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    let mut p = template.clone();
    c.load_params(prefix, &mut p).map_err(ckpt_err(path))?;
    Ok(p)
}

fn stored_net<S: serde::de::DeserializeOwned>(c: &Checkpoint, path: &Path) -> Result<S> {
    serde_json::from_value(c.meta["spec"]["net"].clone())
        .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), message: format!("bad spec: {e}") })
}

fn open(dir: &Path, s: StageName) -> Result<(Checkpoint, PathBuf)> {
    let path = dir.join(s.checkpoint_file());
    let c = Checkpoint::load(&path).map_err(ckpt_err(&path))?;
    if c.meta["kind"] != s.as_str() {
        return Err(Error::Checkpoint { path, message: format!("not a {} checkpoint", s.as_str()) });
    }
    if c.meta["complete"] != json!(true) {
        log::warn!("{}: stage did not finish training", path.display());
    }
    Ok((c, path))
}

/// Loads `G_x`, `G_r` and `G_z` from the checkpoints in `dir`.
pub fn load_model(dir: &Path) -> Result<DehazeModel> {
    let (c, p) = open(dir, StageName::H2h)?;
    let h2h_spec: H2HSpec = stored_net(&c, &p)?;
    let t = UNet::<f32>::new(h2h_spec.gx(), 0);
    let gx = UNet::from_params(h2h_spec.gx(), params_with_prefix(&c, &p, "gx", t.params())?).expect("matching layout");

    let (c, p) = open(dir, StageName::Hsc)?;
    let hsc_spec: CatalystSpec = stored_net(&c, &p)?;
    let t = ResNet::<f32>::new(hsc_spec.net(), 0);
    let gr = ResNet::from_params(hsc_spec.net(), params_with_prefix(&c, &p, "gr", t.params())?).expect("matching layout");

    let (c, p) = open(dir, StageName::I2i)?;
    let i2i_spec: I2ISpec = stored_net(&c, &p)?;
    let t = UNet::<f32>::new(i2i_spec.gz(), 0);
    let gz = UNet::from_params(i2i_spec.gz(), params_with_prefix(&c, &p, "gz", t.params())?).expect("matching layout");

    Ok(DehazeModel { gx, gr, gz, multiple: h2h_spec.multiple().max(i2i_spec.multiple()) })
}
