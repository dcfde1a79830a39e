//! End-to-end runs: data, both training stages, evaluation.

use crate::config::RunConfig;
use crate::dataset::{generate, Dataset};
use crate::error::Result;
use crate::eval::{base_views, evaluate, MetricsReport};
use crate::generator::GeneratorMode;
use crate::model::{Checkpoint, FewShotModel};
use crate::trainer::{stage1_train, stage2_train, TrainLog};

pub fn make_dataset(config: &RunConfig) -> Result<Dataset> {
    let mut data = config.data.clone();
    data.seed = config.seed;
    data.input_dim = config.extractor.input_dim;
    generate(&data)
}

/// Stage 1 from scratch. The returned model uses test-time averaging.
pub fn run_stage1(config: &RunConfig, dataset: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let views = base_views(dataset, config.train.base_holdout)?;
    let mut model = FewShotModel::init(
        config.extractor.clone(),
        config.train.head,
        dataset.split.base.len(),
        GeneratorMode::AvgOnly,
        config.seed,
    )?;
    let log = stage1_train(&mut model, dataset, &views, &config.train, config.seed)?;
    Ok((
        Checkpoint {
            stage: 1,
            run_config: config.to_text(),
            model,
        },
        log,
    ))
}

/// Stage 2 on top of a stage-1 checkpoint; θ is left untouched.
pub fn run_stage2(config: &RunConfig, dataset: &Dataset, stage1: &Checkpoint) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let views = base_views(dataset, config.train.base_holdout)?;
    let mut model = stage1.model.clone();
    let log = stage2_train(&mut model, dataset, &views, &config.train, config.seed, None)?;
    Ok((
        Checkpoint {
            stage: 2,
            run_config: config.to_text(),
            model,
        },
        log,
    ))
}

pub fn run_eval(config: &RunConfig, dataset: &Dataset, model: &FewShotModel) -> Result<MetricsReport> {
    config.validate()?;
    let views = base_views(dataset, config.train.base_holdout)?;
    evaluate(model, dataset, &views, &config.eval, config.seed, config.to_map())
}

pub struct PipelineOutput {
    pub stage1: Checkpoint,
    pub stage2: Checkpoint,
    pub log1: TrainLog,
    pub log2: TrainLog,
    /// Stage-1 model with test-time averaging.
    pub report1: MetricsReport,
    pub report2: MetricsReport,
}

pub fn run_all(config: &RunConfig, dataset: &Dataset) -> Result<PipelineOutput> {
    let (stage1, log1) = run_stage1(config, dataset)?;
    let report1 = run_eval(config, dataset, &stage1.model)?;
    let (stage2, log2) = run_stage2(config, dataset, &stage1)?;
    let report2 = run_eval(config, dataset, &stage2.model)?;
    Ok(PipelineOutput {
        stage1,
        stage2,
        log1,
        log2,
        report1,
        report2,
    })
}
