//! Matched-budget ablation sweeps over one configuration axis.

use serde::{Deserialize, Serialize};

use super::data::dataset_for;
use super::train::{evaluate, train};
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::fusion::FusionMechanism;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CapsuleTypes,
    ShareParams,
    FusionMechanism,
    Modalities,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] =
        [SweepAxis::CapsuleTypes, SweepAxis::ShareParams, SweepAxis::FusionMechanism, SweepAxis::Modalities];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::CapsuleTypes => "capsule_types",
            SweepAxis::ShareParams => "share_params",
            SweepAxis::FusionMechanism => "fusion_mechanism",
            SweepAxis::Modalities => "modalities",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The settings compared along this axis.
    pub fn settings(self) -> Vec<Setting> {
        match self {
            SweepAxis::CapsuleTypes => [4, 8, 16, 25].into_iter().map(Setting::CapsuleTypes).collect(),
            SweepAxis::ShareParams => vec![Setting::ShareParams(true), Setting::ShareParams(false)],
            SweepAxis::FusionMechanism => FusionMechanism::ALL.into_iter().map(Setting::Fusion).collect(),
            SweepAxis::Modalities => {
                [vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 1, 2]].into_iter().map(Setting::Modalities).collect()
            }
        }
    }
}

/// One point on a sweep axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    CapsuleTypes(usize),
    ShareParams(bool),
    Fusion(FusionMechanism),
    /// Generator ids; 0 visible, 1 depth, 2 thermal.
    Modalities(Vec<usize>),
}

impl Setting {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        match self {
            Setting::CapsuleTypes(t) => cfg.part_types = *t,
            Setting::ShareParams(b) => cfg.share_params = *b,
            Setting::Fusion(f) => cfg.fusion = *f,
            Setting::Modalities(m) => cfg.modalities = m.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Setting::CapsuleTypes(t) => t.to_string(),
            Setting::ShareParams(b) => b.to_string(),
            Setting::Fusion(f) => f.name().to_string(),
            Setting::Modalities(m) => m.iter().map(|&i| ["V", "D", "T"][i]).collect::<Vec<_>>().join("+"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub setting: String,
    pub repeat: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Mean training loss of the last epoch.
    pub train_loss: f64,
    /// Dataset loss after training.
    pub eval_loss: f64,
    /// Segmentation: mIoU. Saliency: MAE.
    pub metric: f64,
}

pub const CSV_HEADER: &str = "axis,setting,repeat,seed,epochs,train_loss,eval_loss,metric";

pub fn rows_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis, r.setting, r.repeat, r.seed, r.epochs, r.train_loss, r.eval_loss, r.metric
        ));
    }
    s
}

/// Trains every setting `repeats` times. Repeat `r` uses seed `cfg.seed + r`
/// for both data and initialisation, so settings are compared on identical scenes.
pub fn sweep(cfg: &PipelineConfig, axis: SweepAxis, repeats: usize) -> Result<Vec<SweepRow>> {
    sweep_settings(cfg, axis, &axis.settings(), repeats)
}

pub fn sweep_settings(cfg: &PipelineConfig, axis: SweepAxis, settings: &[Setting], repeats: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(settings.len() * repeats);
    for repeat in 0..repeats {
        let mut base = cfg.clone();
        base.seed = cfg.seed.wrapping_add(repeat as u64);
        let scenes = dataset_for(&base)?;
        for setting in settings {
            let mut run_cfg = base.clone();
            setting.apply(&mut run_cfg);
            let run = train(&run_cfg, &scenes, None)?;
            let report = evaluate(&run.model, &run.store, &run_cfg, &scenes)?;
            let metric_key = super::train::metric_name(run_cfg.task);
            rows.push(SweepRow {
                axis: axis.name().into(),
                setting: setting.label(),
                repeat,
                seed: run_cfg.seed,
                epochs: run.log.len(),
                train_loss: run.log.last().map_or(f64::NAN, |l| l.loss),
                eval_loss: report.get("loss").unwrap_or(f64::NAN),
                metric: report.get(metric_key).unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    #[test]
    fn axes_cover_the_ablation_grid() {
        let labels = |a: SweepAxis| a.settings().iter().map(Setting::label).collect::<Vec<_>>();
        assert_eq!(labels(SweepAxis::CapsuleTypes), ["4", "8", "16", "25"]);
        assert_eq!(labels(SweepAxis::Modalities), ["V+D", "V+T", "D+T", "V+D+T"]);
        assert_eq!(labels(SweepAxis::ShareParams), ["true", "false"]);
        assert_eq!(labels(SweepAxis::FusionMechanism).len(), 4);
        for a in SweepAxis::ALL {
            assert_eq!(SweepAxis::parse(a.name()), Some(a));
        }
    }

    #[test]
    fn row_count_is_settings_times_repeats() {
        let mut cfg = PipelineConfig::new(Task::Smm, 2);
        cfg.channels = 2;
        cfg.scenes = 1;
        cfg.epochs = 1;
        cfg.size = Some(4);
        let rows = sweep(&cfg, SweepAxis::ShareParams, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows_csv(&rows).lines().count(), 5);
        assert_eq!(rows[2].seed, 3);
    }
}
