//! Frozen checkpoints and their expected outputs. Run the ignored
//! `regenerate_golden_files` test after an intentional numerical change.

use std::io::BufReader;
use std::path::PathBuf;

use pwrf_core::harness::{checkpoint, data, evaluate, train, Model};
use pwrf_core::tensor::{read_dump, write_dump, Tape, Tensor};
use pwrf_core::{PipelineConfig, Task};


fn golden_dir(task: Task) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(task.name())
}

fn config(task: Task) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(task, 17);
    cfg.channels = 4;
    cfg.part_types = 2;
    cfg.scenes = 2;
    cfg.size = Some(8);
    cfg.epochs = 2;
    cfg
}

fn predictions(model: &Model, store: &pwrf_core::tensor::ParamStore, cfg: &PipelineConfig) -> Vec<Tensor> {
    data::dataset_for(cfg)
        .unwrap()
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, store, &s.inputs(&cfg.modalities)).unwrap();
            tape.value(out.prediction).clone()
        })
        .collect()
}

#[test]
#[ignore = "rewrites the committed golden files"]
fn regenerate_golden_files() {
    for task in [Task::Smm, Task::Vdt] {
        let cfg = config(task);
        let dir = golden_dir(task);
        let scenes = data::dataset_for(&cfg).unwrap();
        let run = train(&cfg, &scenes, None).unwrap();
        checkpoint::save(dir.join("checkpoint"), &cfg, &run.store).unwrap();
        let mut bytes = Vec::new();
        for p in predictions(&run.model, &run.store, &cfg) {
            write_dump(&p, &mut bytes).unwrap();
        }
        std::fs::write(dir.join("predictions.tensors"), bytes).unwrap();
        let report = evaluate(&run.model, &run.store, &cfg, &scenes).unwrap();
        std::fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&report.aggregate).unwrap() + "\n").unwrap();
    }
}

#[test]
fn checkpoints_reproduce_golden_outputs() {
    for task in [Task::Smm, Task::Vdt] {
        let dir = golden_dir(task);
        let (cfg, model, store) = checkpoint::load(dir.join("checkpoint")).unwrap();
        assert_eq!(cfg.task, task);
        let file = std::fs::File::open(dir.join("predictions.tensors")).unwrap();
        let mut reader = BufReader::new(file);
        for got in predictions(&model, &store, &cfg) {
            let want = read_dump(&mut reader).unwrap();
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{task:?}: {a} vs {b}");
            }
        }
        let scenes = data::dataset_for(&cfg).unwrap();
        let report = evaluate(&model, &store, &cfg, &scenes).unwrap();
        let text = std::fs::read_to_string(dir.join("aggregate.json")).unwrap();
        let want: std::collections::BTreeMap<String, f64> = serde_json::from_str(&text).unwrap();
        for (k, v) in want {
            // decimal JSON text is not guaranteed to round-trip the last bit
            assert!((report.get(&k).unwrap() - v).abs() < 1e-12, "{task:?} {k}");
        }
    }
}

#[test]
fn training_reproduces_golden_checkpoint() {
    for task in [Task::Smm, Task::Vdt] {
        let cfg = config(task);
        let run = train(&cfg, &data::dataset_for(&cfg).unwrap(), None).unwrap();
        let (_, _, store) = checkpoint::load(golden_dir(task).join("checkpoint")).unwrap();
        for id in store.ids() {
            for (a, b) in store.tensor(id).data().iter().zip(run.store.tensor(id).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
