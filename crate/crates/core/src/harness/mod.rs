//! Experiment driver: synthetic data, training, checkpoints, ablation sweeps
//! and routing explanations. The functions here back the `pwrf` command line
//! and write their artifacts into an output directory.

pub mod checkpoint;
pub mod data;
pub mod explain;
pub mod export;
pub mod model;
pub mod sweep;
pub mod train;

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

pub use data::{generate_dataset, SceneRecipe, SyntheticScene};
pub use explain::{explain, Explanation};
pub use model::{Model, ModelOutput};
pub use sweep::{sweep, SweepAxis, SweepRow};
pub use train::{evaluate, train, EpochLog, EvalReport, StopRule, TrainRun};

use crate::config::{PipelineConfig, Task};
use crate::error::{contract_err, Result};
use crate::smm::SmmModel;
use crate::tensor::{grad_check, write_dump, GradCheckOptions, GradCheckReport};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Serialize)]
struct DatasetIndex<'a> {
    task: Task,
    seed: u64,
    size: usize,
    classes: usize,
    scenes: Vec<&'a SceneRecipe>,
}

/// Writes recipes to `dataset.json` and, per scene, the modality images and
/// labels as consecutive tensor dumps plus a PGM of the labels.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &PipelineConfig, scenes: &[SyntheticScene]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let index = DatasetIndex {
        task: cfg.task,
        seed: cfg.seed,
        size: cfg.size(),
        classes: cfg.classes,
        scenes: scenes.iter().map(|s| &s.recipe).collect(),
    };
    std::fs::write(dir.join(DATASET_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    for (i, s) in scenes.iter().enumerate() {
        let mut out = BufWriter::new(std::fs::File::create(dir.join(format!("scene_{i:04}.tensors")))?);
        for m in &s.modalities {
            write_dump(m, &mut out)?;
        }
        write_dump(&s.labels, &mut out)?;
        out.flush()?;
        let (h, w) = (s.labels.shape()[0], s.labels.shape()[1]);
        let pixels = match cfg.task {
            Task::Smm => export::class_pixels(&s.label_ids(), cfg.classes),
            Task::Vdt => export::saliency_pixels(s.labels.data()),
        };
        export::write_pgm(dir.join(format!("scene_{i:04}_labels.pgm")), h, w, &pixels)?;
    }
    if cfg.task == Task::Smm {
        std::fs::write(dir.join("palette.json"), export::palette_json(cfg.classes) + "\n")?;
    }
    Ok(())
}

/// Trains on the configured synthetic dataset and writes the configuration,
/// the per-epoch log and a checkpoint into `dir`.
pub fn run_train(cfg: &PipelineConfig, dir: impl AsRef<Path>) -> Result<TrainRun> {
    let dir = dir.as_ref();
    cfg.validate()?;
    let scenes = data::dataset_for(cfg)?;
    let run = train(cfg, &scenes, None)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    std::fs::write(dir.join(LOG_FILE), train::log_csv(cfg.task, &run.log))?;
    checkpoint::save(dir.join(CHECKPOINT_DIR), cfg, &run.store)?;
    Ok(run)
}

/// Evaluates a checkpoint on the dataset its configuration describes and
/// writes `report.json` (or `report.csv`) plus one prediction PGM per scene.
pub fn run_eval(checkpoint_dir: impl AsRef<Path>, out: impl AsRef<Path>, csv: bool) -> Result<EvalReport> {
    let out = out.as_ref();
    let (cfg, model, store) = checkpoint::load(checkpoint_dir)?;
    let scenes = data::dataset_for(&cfg)?;
    let report = evaluate(&model, &store, &cfg, &scenes)?;
    std::fs::create_dir_all(out)?;
    if csv {
        std::fs::write(out.join("report.csv"), report.to_csv())?;
    } else {
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    let preds = train::predict_all(&model, &store, &cfg, &scenes)?;
    for (i, p) in preds.iter().enumerate() {
        let (h, w) = (p.shape()[0], p.shape()[1]);
        let pixels = match cfg.task {
            Task::Smm => export::class_pixels(&SmmModel::predict(p), cfg.classes),
            Task::Vdt => export::saliency_pixels(p.data()),
        };
        export::write_pgm(out.join(format!("pred_{i:04}.pgm")), h, w, &pixels)?;
    }
    if cfg.task == Task::Smm {
        std::fs::write(out.join("palette.json"), export::palette_json(cfg.classes) + "\n")?;
    }
    Ok(report)
}

/// Explains one pixel of a checkpoint's routing on scene `scene`.
pub fn run_explain(checkpoint_dir: impl AsRef<Path>, scene: usize, stage: usize, row: usize, col: usize) -> Result<Explanation> {
    let (cfg, model, store) = checkpoint::load(checkpoint_dir)?;
    let scenes = data::dataset_for(&cfg)?;
    let s = scenes.get(scene).ok_or_else(|| contract_err!("scene {scene} out of range (0..{})", scenes.len()))?;
    explain(&model, &store, &cfg, &s.inputs(&cfg.modalities), Some(scene), stage, row, col)
}

/// Standard deviation of the noise added to every parameter before a model gradient check.
pub const GRAD_CHECK_JITTER: f64 = 1e-2;

/// Finite-difference check of the full forward pass and training loss on
/// the first scene of the configured dataset.
///
/// Parameters are first moved off their initial values by small Gaussian
/// noise (seeded by `options.seed`). Zero-initialised norm offsets feeding a
/// ReLU on a 1x1 feature map would otherwise sit exactly on the kink, where
/// central differences average the two one-sided slopes.
pub fn model_grad_check(cfg: &PipelineConfig, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, mut store) = Model::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let noise = Normal::new(0.0, GRAD_CHECK_JITTER).expect("valid std");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.values_mut(id).iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let mut one = cfg.clone();
    one.scenes = 1;
    let scene = data::dataset_for(&one)?.remove(0);
    let inputs = scene.inputs(&cfg.modalities);
    grad_check(
        &mut store,
        |tape, store| {
            let out = model.forward(tape, store, &inputs)?;
            model.loss(tape, &out, &scene.labels, cfg)
        },
        options,
    )
}
