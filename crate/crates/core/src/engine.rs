//! Multi-dataset training: every step draws one dataset from the hardness
//! sampler, trains on a batch under that dataset's frozen head, and feeds
//! the batch box loss back to the sampler.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{load_registry, OptimizerConfig, OptimizerKind, TrainConfig};
use crate::data::{render, Registry, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::matching::LossBreakdown;
use crate::model::Detector;
use crate::params::ParamStore;
use crate::sampler::{SamplerSnapshot, SamplerState};
use crate::tape::Gradients;

pub const METRICS_HEADER: [&str; 6] = ["step", "dataset_id", "cls", "l1", "giou", "total"];

/// SGD with momentum, or Adam. All state is kept at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
    pub t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect();
        let second = match config.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => zeros.clone(),
        };
        Self {
            config,
            first: zeros,
            second,
            t: 0,
        }
    }

    /// Clips, applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads.global_norm();
        let c = &self.config;
        let clip = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
        self.t += 1;
        let f32r = |x: f64| x as f32 as f64;
        for id in params.ids().collect::<Vec<_>>() {
            let first = &mut self.first[id.0];
            let g = grads.get(id);
            match c.kind {
                OptimizerKind::Sgd => {
                    match g {
                        Some(g) => first.zip_mut_with(g, |v, &g| *v = f32r(c.momentum * *v + clip * g)),
                        None => first.mapv_inplace(|v| f32r(c.momentum * v)),
                    }
                    params.value_mut(id).zip_mut_with(first, |p, &v| *p = f32r(*p - c.lr * v));
                }
                OptimizerKind::Adam => {
                    let second = &mut self.second[id.0];
                    let zero;
                    let g = match g {
                        Some(g) => g,
                        None => {
                            zero = Array2::zeros(first.dim());
                            &zero
                        }
                    };
                    first.zip_mut_with(g, |m, &g| *m = f32r(c.momentum * *m + (1.0 - c.momentum) * clip * g));
                    second.zip_mut_with(g, |v, &g| {
                        let g = clip * g;
                        *v = f32r(c.beta2 * *v + (1.0 - c.beta2) * g * g)
                    });
                    let bc1 = 1.0 - c.momentum.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    let p = params.value_mut(id);
                    ndarray::Zip::from(p).and(&*first).and(&*second).for_each(|p, &m, &v| {
                        *p = f32r(*p - c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps));
                    });
                }
            }
        }
        norm
    }
}

/// One training step's batch-mean loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub dataset_id: String,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub dataset_id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub sampler: Vec<SamplerSnapshot>,
    pub evals: Vec<EvalRow>,
}

impl RunMetrics {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn write_sampler_csv(&self, path: &Path) -> Result<()> {
        write_sampler_csv(path, &self.sampler)
    }

    pub fn write_eval_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.evals)
    }

    /// Number of steps drawn from each dataset.
    pub fn counts(&self) -> HashMap<String, usize> {
        let mut out = HashMap::new();
        for r in &self.rows {
            *out.entry(r.dataset_id.clone()).or_insert(0) += 1;
        }
        out
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sampler_csv(path: &Path, rows: &[SamplerSnapshot]) -> Result<()> {
    write_sampler_rows(std::fs::File::create(path)?, rows)
}

/// Sampler snapshots as CSV with header `step,dataset_id,L_m,S_m,w_m,p_m`.
pub fn write_sampler_rows<W: std::io::Write>(writer: W, rows: &[SamplerSnapshot]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "dataset_id", "L_m", "S_m", "w_m", "p_m"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.dataset_id.clone(),
            r.box_loss.map(|l| l.to_string()).unwrap_or_default(),
            r.size.to_string(),
            r.weight.to_string(),
            r.probability.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::parse(path.display().to_string(), format!("unexpected header {header:?}")));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

/// What `plot-sampler` needs to replay a run's sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub datasets: Vec<(String, usize)>,
    pub window: usize,
    pub recompute_every: usize,
    pub loss_floor: f64,
    pub loss: crate::matching::LossWeights,
    pub steps: usize,
    pub seed: u64,
}

impl RunInfo {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::from_json(path, e))
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    registry: Registry,
    pub detector: Detector,
    pub optimizer: Optimizer,
    pub sampler: SamplerState,
    step: usize,
    pub metrics: RunMetrics,
    images: HashMap<String, Vec<Array3<f64>>>,
}

/// Final state of a run.
pub struct TrainOutcome {
    pub detector: Detector,
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
}

impl Trainer {
    pub fn new(config: TrainConfig, registry: Registry) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(config.model.clone(), config.seed)?;
        let sampler = SamplerState::from_registry(&registry, &config.sampler, sampler_seed(config.seed))?;
        let optimizer = Optimizer::new(config.optimizer.clone(), &detector.params);
        Self::assemble(config, registry, detector, optimizer, sampler, 0)
    }

    /// Continues from a checkpoint; the registry must match the one it was trained on.
    pub fn resume(config: TrainConfig, registry: Registry, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.model != config.model {
            return Err(Error::Config("checkpoint model configuration differs from the run's".into()));
        }
        let ids: Vec<String> = ckpt.sampler.slots().iter().map(|s| s.dataset_id.clone()).collect();
        if ids != registry.ids() {
            return Err(Error::Config(format!(
                "checkpoint was trained on {ids:?}, registry holds {:?}",
                registry.ids()
            )));
        }
        if ckpt.optimizer.config.kind != config.optimizer.kind {
            return Err(Error::Config("checkpoint optimizer kind differs from the run's".into()));
        }
        let detector = Detector::from_params(ckpt.model.clone(), ckpt.params)?;
        let mut optimizer = ckpt.optimizer;
        optimizer.config = config.optimizer.clone();
        Self::assemble(config, registry, detector, optimizer, ckpt.sampler, ckpt.step)
    }

    fn assemble(
        config: TrainConfig,
        registry: Registry,
        detector: Detector,
        optimizer: Optimizer,
        sampler: SamplerState,
        step: usize,
    ) -> Result<Self> {
        if registry.is_empty() {
            return Err(Error::Config("training needs at least one dataset".into()));
        }
        let mut images = HashMap::new();
        for (spec, head) in registry.iter() {
            if head.dim() != config.model.embed_dim {
                return Err(Error::Shape(format!(
                    "head `{}` has width {}, model embed_dim is {}",
                    spec.dataset_id,
                    head.dim(),
                    config.model.embed_dim
                )));
            }
            images.insert(
                spec.dataset_id.clone(),
                spec.train.iter().map(|r| render(&r.recipe).0).collect(),
            );
        }
        Ok(Self {
            config,
            registry,
            detector,
            optimizer,
            sampler,
            step,
            metrics: RunMetrics::default(),
            images,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn step_once(&mut self) -> Result<&MetricsRow> {
        let step = self.step + 1;
        let w = self.config.loss;
        let id = self.sampler.sample_dataset();
        let picks = (0..self.config.batch_size)
            .map(|_| self.sampler.sample_image(&id))
            .collect::<Result<Vec<_>>>()?;
        let (spec, head) = self.registry.lookup(&id)?;
        let images = &self.images[&id];

        let mut grads = Gradients::default();
        let (mut cls, mut l1, mut giou) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let (lb, g) = self
                .detector
                .loss_and_grad(&images[i], &spec.train[i].annotations, head, &w)?;
            if !lb.total.is_finite() {
                return Err(Error::Diverged { step, value: lb.total });
            }
            cls += lb.cls;
            l1 += lb.l1;
            giou += lb.giou;
            grads.accumulate(&g);
        }
        let n = picks.len() as f64;
        grads.scale(1.0 / n);
        let batch = LossBreakdown::new(&id, cls / n, l1 / n, giou / n, &w);
        let norm = self.optimizer.step(&mut self.detector.params, &grads);
        if !norm.is_finite() {
            return Err(Error::Diverged { step, value: norm });
        }
        self.sampler.record_box_loss(&id, w.box_loss(batch.l1, batch.giou))?;
        self.metrics.rows.push(MetricsRow {
            step,
            dataset_id: id,
            cls: batch.cls,
            l1: batch.l1,
            giou: batch.giou,
            total: batch.total,
        });
        if step % self.config.sampler.recompute_every == 0 {
            self.sampler.compute_weights();
            self.metrics.sampler.extend(self.sampler.snapshot(step));
        }
        if self.config.eval_every > 0 && step % self.config.eval_every == 0 {
            let report = evaluate(&self.detector, &self.registry, &EvalOptions::default())?;
            for d in report.datasets {
                self.metrics.evals.push(EvalRow {
                    step,
                    dataset_id: d.dataset_id,
                    ap: d.ap,
                });
            }
        }
        self.step = step;
        Ok(self.metrics.rows.last().expect("row just pushed"))
    }

    /// Steps until `config.steps` optimizer steps have been taken in total.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.steps)
    }

    pub fn run_until(&mut self, steps: usize) -> Result<()> {
        while self.step < steps {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.detector.config.clone(),
            params: self.detector.params.clone(),
            optimizer: self.optimizer.clone(),
            sampler: self.sampler.clone(),
            step: self.step,
            encoder: self.config.encoder.clone(),
        }
    }

    pub fn run_info(&self) -> RunInfo {
        RunInfo {
            datasets: self.registry.iter().map(|(d, _)| (d.dataset_id.clone(), d.size())).collect(),
            window: self.config.sampler.window,
            recompute_every: self.config.sampler.recompute_every,
            loss_floor: self.config.sampler.loss_floor,
            loss: self.config.loss,
            steps: self.config.steps,
            seed: self.config.seed,
        }
    }

    /// Writes metrics, sampler and eval CSVs, run info and the checkpoint.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.metrics.write_csv(&dir.join("metrics.csv"))?;
        self.metrics.write_sampler_csv(&dir.join("sampler.csv"))?;
        self.metrics.write_eval_csv(&dir.join("eval.csv"))?;
        std::fs::write(
            dir.join("run_info.json"),
            serde_json::to_string_pretty(&self.run_info()).expect("run info serializes"),
        )?;
        save_checkpoint(&self.checkpoint(), &dir.join("checkpoint"))
    }

    pub fn finish(self) -> TrainOutcome {
        let checkpoint = self.checkpoint();
        TrainOutcome {
            detector: self.detector,
            checkpoint,
            metrics: self.metrics,
        }
    }
}

fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_5a3b_1e55_0001
}

/// Trains on an in-memory registry for `config.steps` steps.
pub fn train_registry(config: &TrainConfig, registry: Registry) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), registry)?;
    trainer.run()?;
    if let Some(dir) = &config.out_dir {
        trainer.write_outputs(dir)?;
    }
    Ok(trainer.finish())
}

/// Loads `config.datasets` and trains on all of them.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let registry = load_registry(&config.datasets, &config.encoder, config.model.embed_dim)?;
    train_registry(config, registry)
}

/// Same budget and seed, restricted to a single dataset.
pub fn single_dataset_baseline(config: &TrainConfig, registry: &Registry, dataset_id: &str) -> Result<TrainOutcome> {
    train_registry(config, registry.subset(&[dataset_id])?)
}

/// Resumes a run from `ckpt_dir` and trains to `config.steps`.
pub fn resume(config: &TrainConfig, registry: Registry, ckpt_dir: &Path) -> Result<TrainOutcome> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let mut trainer = Trainer::resume(config.clone(), registry, ckpt)?;
    trainer.run()?;
    if let Some(dir) = &config.out_dir {
        trainer.write_outputs(dir)?;
    }
    Ok(trainer.finish())
}

/// Mean AP on the validation split of each registered dataset.
pub fn validation_report(detector: &Detector, registry: &Registry) -> Result<crate::eval::ApReport> {
    evaluate(
        detector,
        registry,
        &EvalOptions {
            split: Split::Val,
            ..EvalOptions::default()
        },
    )
}
