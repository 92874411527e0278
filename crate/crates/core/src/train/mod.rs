//! Seeded training and evaluation loops, with logs and checkpoints.

mod dataset;

pub use dataset::{generate_dataset, read_manifest, Dataset, ManifestEntry, MANIFEST};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, RngState};
use crate::config::Config;
use crate::data::{DataError, PreparedScene};
use crate::decoder::{DecoderError, LayerPrediction, Model};
use crate::encode::EncodeError;
use crate::matchloss::{compute_loss, LossTerms, MatchError};
use crate::metrics::{evaluate, extract_instances, EvalReport, MatchRecord, MetricsError, SceneEval};
use crate::numcore::{AdamW, Graph, NumError, PolySchedule, Tensor};
use crate::par::Exec;
use crate::scene::{Point, SceneError};

pub const TRAIN_LOG: &str = "train.tsv";
pub const TRACE_LOG: &str = "traces.tsv";
pub const TRAIN_LOG_HEADER: &str =
    "epoch\tstep\tlr\tloss\tcls\tbce\tdice\tcenter\tval_map\tval_map50\tval_map25\trecall25\trecall50";
pub const TRACE_LOG_HEADER: &str = "step\tepoch\tscene\tgt\tquery\tx\ty\tz";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not fit the model: {0}")]
    Incompatible(String),
    #[error("no training scenes (dataset of {total} with {val} held out)")]
    NoTrainingData { total: usize, val: usize },
    #[error("non-finite value at epoch {epoch}, step {step}: {detail}; last good checkpoint: {}", .last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFinite { epoch: u64, step: u64, detail: String, last_checkpoint: Option<PathBuf> },
}

impl TrainError {
    /// Numeric failure (as opposed to bad input or I/O).
    pub fn is_numeric(&self) -> bool {
        let num = |e: &NumError| matches!(e, NumError::NonFinite { .. });
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Decoder(
                DecoderError::Num(e) | DecoderError::Layer { source: e, .. } | DecoderError::Encode(EncodeError::Num(e)),
            ) => num(e),
            TrainError::Match(MatchError::Num(e)) => num(e),
            _ => false,
        }
    }
}

/// Loss, gradients and final-layer matching of one scene.
#[derive(Clone, Debug)]
pub struct SceneStep {
    pub grads: Vec<Option<Tensor>>,
    pub terms: LossTerms,
    pub query_of_gt: Vec<usize>,
}

/// Forward, loss and backward for one scene.
pub fn scene_step(model: &Model, scene: &PreparedScene, config: &Config) -> Result<SceneStep, TrainError> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, config.train.mode)?;
    let loss = compute_loss(&mut g, &pass, scene, &config.loss)?;
    g.backward(loss.total).map_err(DecoderError::from)?;
    let query_of_gt = loss.assignments.last().map(|a| a.query_of_gt.clone()).unwrap_or_default();
    let mut terms = loss.mean_terms();
    terms.total = g.value(loss.total).item();
    Ok(SceneStep { grads: g.param_grads(model.params.len()), terms, query_of_gt })
}

/// Mean of per-scene gradients, summed in scene order. Parameters a scene
/// does not touch contribute zeros.
pub fn reduce_grads(model: &Model, steps: &[SceneStep]) -> Vec<Option<Tensor>> {
    let scale = 1.0 / steps.len().max(1) as f64;
    model
        .params
        .ids()
        .map(|id| {
            let mut acc = Tensor::zeros(model.params.get(id).shape());
            for s in steps {
                if let Some(g) = &s.grads[id.index()] {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            acc.data_mut().iter_mut().for_each(|a| *a *= scale);
            Some(acc)
        })
        .collect()
}

/// Predictions of the first and last decoder layers.
pub fn predict(model: &Model, scene: &PreparedScene, config: &Config) -> Result<(LayerPrediction, LayerPrediction), TrainError> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, config.train.mode)?;
    Ok((pass.prediction(&g, 0), pass.last(&g)))
}

/// Mask AP from the last layer and initial-mask recall from the first.
pub fn evaluate_model(model: &Model, scenes: &[PreparedScene], config: &Config, exec: Exec) -> Result<EvalReport, TrainError> {
    let preds = exec.try_map(scenes.len(), |i| predict(model, &scenes[i], config))?;
    let results: Vec<_> = preds
        .iter()
        .map(|(_, last)| extract_instances(last, config.eval.top_k, config.eval.min_tokens))
        .collect();
    let inputs: Vec<SceneEval> = scenes
        .iter()
        .zip(&preds)
        .zip(&results)
        .map(|((s, (first, _)), r)| SceneEval { results: r, gt: &s.gt, positions: &s.tokens.positions, layer1: Some(first) })
        .collect();
    Ok(evaluate(&inputs, config.model.num_classes)?)
}

/// Summary row of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub terms: LossTerms,
    pub val: Option<EvalReport>,
}

impl EpochLog {
    pub fn tsv_row(&self) -> String {
        let t = &self.terms;
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
        let v = self.val.as_ref();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.step,
            self.lr,
            t.total,
            t.cls,
            t.bce,
            t.dice,
            t.center,
            opt(v.map(|r| r.map)),
            opt(v.map(|r| r.map50)),
            opt(v.map(|r| r.map25)),
            opt(v.and_then(|r| r.recall25)),
            opt(v.and_then(|r| r.recall50)),
        )
    }
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub optim: AdamW,
    /// Completed epochs.
    pub epoch: u64,
    pub exec: Exec,
    rng: ChaCha8Rng,
    last_checkpoint: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

fn append(path: &Path, header: &str, rows: &str) -> Result<(), TrainError> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    if fresh {
        writeln!(f, "{header}").map_err(io_err(path))?;
    }
    f.write_all(rows.as_bytes()).map_err(io_err(path))
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("ckpt_e{epoch:04}.bin")
}

impl Trainer {
    pub fn new(config: Config, exec: Exec) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::Incompatible(e.to_string()))?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        let optim = AdamW::new(config.optim, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(u64::MAX);
        Ok(Self { config, model, optim, epoch: 0, exec, rng, last_checkpoint: None })
    }

    /// Rebuilds the full training state saved in `ckpt`.
    pub fn resume(ckpt: Checkpoint, exec: Exec) -> Result<Self, TrainError> {
        let mut t = Self::new(ckpt.config.clone(), exec)?;
        if ckpt.params.len() != t.model.params.len() {
            return Err(TrainError::Incompatible(format!(
                "{} tensors saved, model has {}",
                ckpt.params.len(),
                t.model.params.len()
            )));
        }
        for (name, value) in ckpt.params {
            let id = t.model.params.id(&name).ok_or_else(|| TrainError::Incompatible(format!("unknown tensor {name}")))?;
            t.model.params.set(id, value).map_err(|e| TrainError::Incompatible(format!("{name}: {e}")))?;
        }
        t.optim = AdamW::from_state(ckpt.config.optim, ckpt.optim_step, ckpt.first_moments, ckpt.second_moments);
        t.epoch = ckpt.epoch;
        t.rng = ckpt.rng.restore();
        Ok(t)
    }

    /// Model parameters only, for evaluation.
    pub fn load_model(ckpt: &Checkpoint) -> Result<Model, TrainError> {
        let mut t = Self::resume(ckpt.clone(), Exec::Sequential)?;
        Ok(std::mem::replace(&mut t.model, Model::new(ckpt.config.model.clone(), 0)?))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let p = &self.model.params;
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            params: p.ids().map(|id| (p.name(id).to_string(), p.get(id).clone())).collect(),
            optim_step: self.optim.step_count(),
            first_moments: self.optim.first_moments().to_vec(),
            second_moments: self.optim.second_moments().to_vec(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.config.train.batch_size) as u64
    }

    fn schedule(&self, n_train: usize) -> PolySchedule {
        PolySchedule {
            base_lr: self.config.optim.lr,
            total_steps: self.steps_per_epoch(n_train) * self.config.train.epochs as u64,
            power: self.config.train.poly_power,
        }
    }

    /// One pass over `train` in a freshly shuffled order. `records` receives
    /// the final-layer assignments of every scene at every step.
    pub fn train_epoch(&mut self, train: &[PreparedScene], records: &mut Vec<MatchRecord>) -> Result<EpochLog, TrainError> {
        if train.is_empty() {
            return Err(TrainError::NoTrainingData { total: 0, val: 0 });
        }
        let schedule = self.schedule(train.len());
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossTerms::default();
        let mut lr = schedule.lr(self.optim.step_count());
        for batch in order.chunks(self.config.train.batch_size) {
            let step = self.optim.step_count();
            let (model, config) = (&self.model, &self.config);
            let steps = self.exec.try_map(batch.len(), |b| scene_step(model, &train[batch[b]], config));
            let steps = steps.map_err(|e| self.numeric(e, step))?;
            for (s, &i) in steps.iter().zip(batch) {
                if !s.terms.total.is_finite() {
                    return Err(self.non_finite(format!("loss {} on scene {i}", s.terms.total), step));
                }
                for (acc, v) in [
                    (&mut sum.total, s.terms.total),
                    (&mut sum.cls, s.terms.cls),
                    (&mut sum.bce, s.terms.bce),
                    (&mut sum.dice, s.terms.dice),
                    (&mut sum.center, s.terms.center),
                ] {
                    *acc += v;
                }
                records.push(MatchRecord {
                    step: step + 1,
                    scene: i,
                    query_of_gt: s.query_of_gt.clone(),
                    gt_centers: train[i].gt.instances.iter().map(|g| g.center).collect(),
                });
            }
            let grads = reduce_grads(&self.model, &steps);
            lr = schedule.lr(step);
            self.optim
                .step(&mut self.model.params, &grads, lr)
                .map_err(|e| self.numeric(TrainError::Decoder(e.into()), step))?;
            if let Some(name) = self.model.params.ids().find(|&id| !self.model.params.get(id).is_finite()) {
                let name = self.model.params.name(name).to_string();
                return Err(self.non_finite(format!("parameter {name} diverged"), step));
            }
        }
        self.epoch += 1;
        let n = train.len() as f64;
        let terms = LossTerms {
            total: sum.total / n,
            cls: sum.cls / n,
            bce: sum.bce / n,
            dice: sum.dice / n,
            center: sum.center / n,
        };
        Ok(EpochLog { epoch: self.epoch, step: self.optim.step_count(), lr, terms, val: None })
    }

    fn non_finite(&self, detail: String, step: u64) -> TrainError {
        TrainError::NonFinite { epoch: self.epoch + 1, step: step + 1, detail, last_checkpoint: self.last_checkpoint.clone() }
    }

    fn numeric(&self, err: TrainError, step: u64) -> TrainError {
        if err.is_numeric() {
            self.non_finite(err.to_string(), step)
        } else {
            err
        }
    }

    /// Trains until `config.train.epochs`, evaluating on `val` and writing
    /// logs and checkpoints under `out` when given.
    pub fn run(
        &mut self,
        train: &[PreparedScene],
        val: &[PreparedScene],
        out: Option<&Path>,
        mut progress: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut logs = Vec::new();
        while self.epoch < self.config.train.epochs as u64 {
            let mut records = Vec::new();
            let mut log = self.train_epoch(train, &mut records)?;
            let last = self.epoch == self.config.train.epochs as u64;
            if !val.is_empty() && (self.epoch.is_multiple_of(self.config.train.eval_every as u64) || last) {
                let report = evaluate_model(&self.model, val, &self.config, self.exec).map_err(|e| {
                    if e.is_numeric() {
                        TrainError::NonFinite {
                            epoch: self.epoch,
                            step: self.optim.step_count(),
                            detail: format!("validation: {e}"),
                            last_checkpoint: self.last_checkpoint.clone(),
                        }
                    } else {
                        e
                    }
                })?;
                log.val = Some(report);
            }
            if let Some(dir) = out {
                append(&dir.join(TRAIN_LOG), TRAIN_LOG_HEADER, &format!("{}\n", log.tsv_row()))?;
                append(&dir.join(TRACE_LOG), TRACE_LOG_HEADER, &trace_rows(self.epoch, &records))?;
                if self.epoch.is_multiple_of(self.config.train.checkpoint_every as u64) || last {
                    let path = dir.join(checkpoint_name(self.epoch));
                    self.checkpoint().save(&path)?;
                    self.last_checkpoint = Some(path);
                }
            }
            progress(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

fn trace_rows(epoch: u64, records: &[MatchRecord]) -> String {
    let mut s = String::new();
    for r in records {
        for (k, (&q, c)) in r.query_of_gt.iter().zip(&r.gt_centers).enumerate() {
            s.push_str(&format!("{}\t{epoch}\t{}\t{k}\t{q}\t{}\t{}\t{}\n", r.step, r.scene, c[0], c[1], c[2]));
        }
    }
    s
}

/// Reads `traces.tsv` back into per-step records.
pub fn read_traces(path: &Path) -> Result<Vec<MatchRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize| TrainError::Manifest(format!("{}:{line}: malformed trace row", path.display()));
    let mut records: Vec<MatchRecord> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad(i + 1));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad(i + 1));
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
        let (step, scene, query) = (int(f[0])?, int(f[2])? as usize, int(f[4])? as usize);
        let center: Point = [real(f[5])?, real(f[6])?, real(f[7])?];
        match records.last_mut() {
            Some(r) if r.step == step && r.scene == scene => {
                r.query_of_gt.push(query);
                r.gt_centers.push(center);
            }
            _ => records.push(MatchRecord { step, scene, query_of_gt: vec![query], gt_centers: vec![center] }),
        }
    }
    Ok(records)
}
