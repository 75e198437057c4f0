//! Adam optimisation, mini-batch training and dataset evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::SyntheticScene;
use super::model::Model;
use crate::config::{PipelineConfig, Task};
use crate::error::{Error, Result};
use crate::metrics::{miou, EvalPair, SaliencyReport};
use crate::smm::SmmModel;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Plain Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`, each divided by `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g: Vec<f64> = store.grad(id).iter().map(|g| g / grad_scale).collect();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let values = store.values_mut(id);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                values[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's scenes.
    pub loss: f64,
    /// Segmentation: dataset mIoU of the epoch's predictions. Saliency: mean MAE.
    pub metric: f64,
}

/// Name of the per-epoch metric column for a task.
pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Smm => "miou",
        Task::Vdt => "mae",
    }
}

/// Renders a log as CSV with a header row.
pub fn log_csv(task: Task, log: &[EpochLog]) -> String {
    let mut s = format!("epoch,loss,{}\n", metric_name(task));
    for row in log {
        s.push_str(&format!("{},{},{}\n", row.epoch, row.loss, row.metric));
    }
    s
}

/// Per-scene and aggregate metrics of a model on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub per_scene: Vec<BTreeMap<String, f64>>,
    pub aggregate: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.aggregate.get(name).copied()
    }

    /// One CSV row per scene followed by an `all` row.
    pub fn to_csv(&self) -> String {
        let cols: Vec<&String> = self.aggregate.keys().collect();
        let mut s = String::from("scene");
        for c in &cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (i, row) in self.per_scene.iter().enumerate() {
            s.push_str(&i.to_string());
            for c in &cols {
                s.push(',');
                if let Some(v) = row.get(*c) {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s.push_str("all");
        for c in &cols {
            s.push_str(&format!(",{}", self.aggregate[*c]));
        }
        s.push('\n');
        s
    }
}

/// Forward value of the prediction for every scene.
pub fn predict_all(model: &Model, store: &ParamStore, cfg: &PipelineConfig, scenes: &[SyntheticScene]) -> Result<Vec<Tensor>> {
    scenes
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, store, &s.inputs(&cfg.modalities))?;
            Ok(tape.value(out.prediction).clone())
        })
        .collect()
}

/// Evaluates `model` on `scenes` with the task's metrics.
pub fn evaluate(model: &Model, store: &ParamStore, cfg: &PipelineConfig, scenes: &[SyntheticScene]) -> Result<EvalReport> {
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut losses = 0.0;
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    let mut saliency = Vec::new();
    for s in scenes {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &s.inputs(&cfg.modalities))?;
        let loss = model.loss(&mut tape, &out, &s.labels, cfg)?;
        let loss = tape.value(loss).item()?;
        losses += loss;
        let pred = tape.value(out.prediction);
        let mut row = BTreeMap::new();
        row.insert("loss".to_string(), loss);
        match cfg.task {
            Task::Smm => {
                let p = SmmModel::predict(pred);
                let g = s.label_ids();
                let acc = p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64 / g.len() as f64;
                row.insert("pixel_accuracy".into(), acc);
                row.insert("miou".into(), miou(&p, &g, cfg.classes)?.mean);
                all_pred.extend(p);
                all_gt.extend(g);
            }
            Task::Vdt => {
                let pair = EvalPair::from_tensors(pred, &s.labels)?;
                let r = SaliencyReport::evaluate(&pair, cfg.beta2, cfg.alpha_s)?;
                row.extend(saliency_fields(&r));
                saliency.push(r);
            }
        }
        per_scene.push(row);
    }
    let n = scenes.len().max(1) as f64;
    let mut aggregate = BTreeMap::new();
    aggregate.insert("loss".to_string(), losses / n);
    match cfg.task {
        Task::Smm => {
            let acc = all_pred.iter().zip(&all_gt).filter(|(a, b)| a == b).count() as f64 / all_gt.len().max(1) as f64;
            aggregate.insert("pixel_accuracy".into(), acc);
            aggregate.insert("miou".into(), miou(&all_pred, &all_gt, cfg.classes)?.mean);
        }
        Task::Vdt => {
            if let Some(r) = SaliencyReport::average(&saliency) {
                aggregate.extend(saliency_fields(&r));
            }
        }
    }
    Ok(EvalReport { task: cfg.task, per_scene, aggregate })
}

fn saliency_fields(r: &SaliencyReport) -> Vec<(String, f64)> {
    vec![
        ("mae".into(), r.mae),
        ("f_adaptive".into(), r.f_adaptive),
        ("f_mean".into(), r.f_mean),
        ("e_adaptive".into(), r.e_adaptive),
        ("e_mean".into(), r.e_mean),
        ("s_measure".into(), r.s_measure),
    ]
}

/// Optional early stop: every `every` epochs the model is evaluated and
/// training ends once `done` accepts the report.
pub struct StopRule<'a> {
    pub every: usize,
    pub done: Box<dyn Fn(&EvalReport) -> bool + 'a>,
}

/// Trained parameters plus the training history.
pub struct TrainRun {
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    /// Report of the evaluation that triggered an early stop, if any.
    pub stopped_by: Option<EvalReport>,
}

/// Trains a fresh model for `cfg` on `scenes`.
pub fn train(cfg: &PipelineConfig, scenes: &[SyntheticScene], stop: Option<&StopRule>) -> Result<TrainRun> {
    let (model, mut store) = Model::build(cfg)?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let mut adam = Adam::new(&store, cfg.learning_rate);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut stopped_by = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut all_pred = Vec::new();
        let mut all_gt = Vec::new();
        let mut mae_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            store.zero_grad();
            for &i in batch {
                let s = &scenes[i];
                let mut tape = Tape::new();
                let step = (|| {
                    let out = model.forward(&mut tape, &store, &s.inputs(&cfg.modalities))?;
                    let loss = model.loss(&mut tape, &out, &s.labels, cfg)?;
                    Ok::<_, Error>((out, loss))
                })();
                let (out, loss) = step.map_err(|e| diverged(e, epoch, i))?;
                let value = tape.value(loss).item()?;
                loss_sum += value;
                let pred = tape.value(out.prediction);
                match cfg.task {
                    Task::Smm => {
                        all_pred.extend(SmmModel::predict(pred));
                        all_gt.extend(s.label_ids());
                    }
                    Task::Vdt => {
                        let d: f64 = pred.data().iter().zip(s.labels.data()).map(|(p, g)| (p - g).abs()).sum();
                        mae_sum += d / pred.numel() as f64;
                    }
                }
                tape.backward_into(loss, &mut store).map_err(|e| diverged(e, epoch, i))?;
            }
            adam.step(&mut store, batch.len() as f64);
            if let Some((_, p)) = store.iter().find(|(_, p)| p.tensor.data().iter().any(|v| !v.is_finite())) {
                let name = &p.name;
                return Err(Error::Divergence(format!("epoch {epoch}: parameter `{name}` became non-finite")));
            }
        }
        let n = scenes.len() as f64;
        let metric = match cfg.task {
            Task::Smm => miou(&all_pred, &all_gt, cfg.classes)?.mean,
            Task::Vdt => mae_sum / n,
        };
        log.push(EpochLog { epoch, loss: loss_sum / n, metric });
        if let Some(rule) = stop {
            if rule.every > 0 && epoch % rule.every == 0 {
                let report = evaluate(&model, &store, cfg, scenes)?;
                if (rule.done)(&report) {
                    stopped_by = Some(report);
                    break;
                }
            }
        }
    }
    Ok(TrainRun { model, store, log, stopped_by })
}

fn diverged(e: Error, epoch: usize, scene: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch}, scene {scene}: non-finite value in {what}")),
        other => other,
    }
}
