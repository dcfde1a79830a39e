//! Few-shot evaluation on held-out novel categories.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, classify_with};
use crate::config::{parse_value, KvSection};
use crate::dataset::{base_holdout_split, BaseViews, Dataset, ExampleRef, SplitKind};
use crate::error::{Error, Result};
use crate::generator::SupportSet;
use crate::model::{FeatureBank, FewShotModel};
use crate::rng::{indexed, stream, Stream};
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub eval_k_novel: usize,
    pub eval_shots: usize,
    pub test_novel_per_category: usize,
    /// Base queries per task, drawn from the held-out base pool.
    pub test_base: usize,
    pub eval_split: SplitKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_tasks: 500,
            eval_k_novel: 5,
            eval_shots: 1,
            test_novel_per_category: 15,
            test_base: 75,
            eval_split: SplitKind::TestNovel,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 {
            return Err(Error::Config("n_tasks must be at least 2".into()));
        }
        if self.eval_k_novel == 0 || self.eval_shots == 0 {
            return Err(Error::Config("eval_k_novel and eval_shots must be positive".into()));
        }
        if self.test_novel_per_category == 0 {
            return Err(Error::Config("test_novel_per_category must be positive".into()));
        }
        if self.eval_split == SplitKind::Base {
            return Err(Error::Config("eval_split must be val or test".into()));
        }
        Ok(())
    }
}

impl KvSection for EvalConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_tasks" => self.n_tasks = parse_value(key, value)?,
            "eval_k_novel" => self.eval_k_novel = parse_value(key, value)?,
            "eval_shots" => self.eval_shots = parse_value(key, value)?,
            "test_novel_per_category" => self.test_novel_per_category = parse_value(key, value)?,
            "test_base" => self.test_base = parse_value(key, value)?,
            "eval_split" => self.eval_split = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_tasks", self.n_tasks.to_string()),
            ("eval_k_novel", self.eval_k_novel.to_string()),
            ("eval_shots", self.eval_shots.to_string()),
            ("test_novel_per_category", self.test_novel_per_category.to_string()),
            ("test_base", self.test_base.to_string()),
            ("eval_split", self.eval_split.to_string()),
        ]
    }
}

/// Base train/held-out partition, a pure function of the dataset seed.
pub fn base_views(dataset: &Dataset, holdout: usize) -> Result<BaseViews> {
    if holdout == 0 {
        return Ok(BaseViews::all(dataset));
    }
    base_holdout_split(dataset, holdout, &mut stream(dataset.config.seed, Stream::Holdout))
}

/// One evaluation task. Category ids are dataset ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotTask {
    pub novel: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    /// `(position in novel, row)`.
    pub query_novel: Vec<(usize, usize)>,
    /// `(base index, row)` from the held-out base pool.
    pub query_base: Vec<(usize, usize)>,
}

pub fn sample_task<R: Rng + ?Sized>(
    dataset: &Dataset,
    views: &BaseViews,
    config: &EvalConfig,
    rng: &mut R,
) -> Result<FewShotTask> {
    let pool = dataset.split.get(config.eval_split);
    if pool.len() < config.eval_k_novel {
        return Err(Error::Config(format!(
            "split {} has {} categories, eval_k_novel = {}",
            config.eval_split,
            pool.len(),
            config.eval_k_novel
        )));
    }
    let need = config.eval_shots + config.test_novel_per_category;
    let novel: Vec<usize> = index::sample(rng, pool.len(), config.eval_k_novel)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let mut support = Vec::with_capacity(novel.len());
    let mut query_novel = Vec::new();
    for (k, &c) in novel.iter().enumerate() {
        let n = dataset.count(c);
        if n < need {
            return Err(Error::InsufficientExamples {
                category: c,
                available: n,
                required: need,
            });
        }
        let picked = index::sample(rng, n, need).into_vec();
        support.push(picked[..config.eval_shots].to_vec());
        query_novel.extend(picked[config.eval_shots..].iter().map(|&i| (k, i)));
    }
    let base_pool: Vec<(usize, usize)> = views
        .test
        .iter()
        .enumerate()
        .flat_map(|(b, rows)| rows.iter().map(move |&i| (b, i)))
        .collect();
    let t_base = config.test_base.min(base_pool.len());
    let query_base = index::sample(rng, base_pool.len(), t_base)
        .into_iter()
        .map(|i| base_pool[i])
        .collect();
    Ok(FewShotTask {
        novel,
        support,
        query_novel,
        query_base,
    })
}

/// Accuracies of one task; `None` when the task has no such queries.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskScores {
    pub novel: Option<f64>,
    pub base: Option<f64>,
    pub both: Option<f64>,
}

/// Generated novel rows for a task, in `task.novel` order.
pub fn novel_weights(model: &FewShotModel, bank: &FeatureBank, task: &FewShotTask) -> Result<Tensor> {
    let base = &model.classifier.base_weights.value;
    let rows = task
        .novel
        .iter()
        .zip(&task.support)
        .map(|(&c, rows)| {
            let refs: Vec<ExampleRef> = rows.iter().map(|&i| ExampleRef { category: c, index: i }).collect();
            let support = SupportSet::new(bank.gather(&refs)?, c)?;
            Ok(model.generator.generate_weight(&support, base, &[])?.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Novel: novel queries against novel rows only. Base: held-out base
/// queries against base rows only. Both: every query against `W*`.
pub fn evaluate_task(
    model: &FewShotModel,
    dataset: &Dataset,
    bank: &FeatureBank,
    task: &FewShotTask,
) -> Result<TaskScores> {
    let head = model.head();
    let tau = model.classifier.tau.value.item();
    let w_base = &model.classifier.base_weights.value;
    let k_base = w_base.rows();
    let w_novel = novel_weights(model, bank, task)?;
    let mut data = w_base.data().to_vec();
    data.extend_from_slice(w_novel.data());
    let w_star = Tensor::matrix(k_base + w_novel.rows(), w_base.cols(), data)?;

    let mut scores = TaskScores::default();
    let mut all_z = Vec::new();
    let mut all_y = Vec::new();
    if !task.query_novel.is_empty() {
        let refs: Vec<ExampleRef> = task
            .query_novel
            .iter()
            .map(|&(k, i)| ExampleRef { category: task.novel[k], index: i })
            .collect();
        let z = bank.gather(&refs)?;
        let y: Vec<usize> = task.query_novel.iter().map(|&(k, _)| k).collect();
        scores.novel = Some(accuracy(&classify_with(&z, &w_novel, head, tau)?, &y));
        all_z.push(z);
        all_y.extend(y.iter().map(|k| k_base + k));
    }
    if !task.query_base.is_empty() {
        let refs: Vec<ExampleRef> = task
            .query_base
            .iter()
            .map(|&(b, i)| ExampleRef { category: dataset.split.base[b], index: i })
            .collect();
        let z = bank.gather(&refs)?;
        let y: Vec<usize> = task.query_base.iter().map(|&(b, _)| b).collect();
        scores.base = Some(accuracy(&classify_with(&z, w_base, head, tau)?, &y));
        all_z.push(z);
        all_y.extend(y);
    }
    if !all_y.is_empty() {
        let d = w_base.cols();
        let data: Vec<f64> = all_z.iter().flat_map(|t| t.data().iter().copied()).collect();
        let z = Tensor::matrix(all_y.len(), d, data)?;
        scores.both = Some(accuracy(&classify_with(&z, &w_star, head, tau)?, &all_y));
    }
    Ok(scores)
}

/// Mean and 95% interval half-width, `1.96 · sd / √n` with the `n − 1`
/// sample deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

/// `None` for an empty slice; a single value has a zero-width interval.
pub fn aggregate(values: &[f64]) -> Option<Stat> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(Stat { mean, ci95: 0.0, n });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(Stat {
        mean,
        ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
        n,
    })
}

/// Results of an evaluation run; accuracies are fractions. Field order is
/// the serialized order. Metrics without any scored task are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub split: String,
    pub head: String,
    pub generator: String,
    pub k_novel: usize,
    pub shots: usize,
    pub n_tasks: usize,
    pub novel_acc: Option<f64>,
    pub novel_ci95: Option<f64>,
    pub base_acc: Option<f64>,
    pub base_ci95: Option<f64>,
    pub both_acc: Option<f64>,
    pub both_ci95: Option<f64>,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: r.version,
                expected: REPORT_VERSION,
            });
        }
        Ok(r)
    }
}

/// Per-task scores, in task order.
pub fn evaluate_tasks(
    model: &FewShotModel,
    dataset: &Dataset,
    views: &BaseViews,
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<TaskScores>> {
    config.validate()?;
    let mut cats: Vec<usize> = dataset.split.base.clone();
    cats.extend_from_slice(dataset.split.get(config.eval_split));
    let bank = FeatureBank::compute(&model.extractor, dataset, &cats)?;
    (0..config.n_tasks)
        .into_par_iter()
        .map(|i| {
            let rng = &mut indexed(seed, Stream::Eval, i as u64);
            let task = sample_task(dataset, views, config, rng)?;
            evaluate_task(model, dataset, &bank, &task)
        })
        .collect()
}

fn summarize(xs: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = xs.flatten().collect();
    aggregate(&v).map_or((None, None), |s| (Some(s.mean), Some(s.ci95)))
}

pub fn evaluate(
    model: &FewShotModel,
    dataset: &Dataset,
    views: &BaseViews,
    config: &EvalConfig,
    seed: u64,
    run_config: BTreeMap<String, String>,
) -> Result<MetricsReport> {
    let tasks = evaluate_tasks(model, dataset, views, config, seed)?;
    let (novel_acc, novel_ci95) = summarize(tasks.iter().map(|t| t.novel));
    let (base_acc, base_ci95) = summarize(tasks.iter().map(|t| t.base));
    let (both_acc, both_ci95) = summarize(tasks.iter().map(|t| t.both));
    Ok(MetricsReport {
        version: REPORT_VERSION,
        split: config.eval_split.to_string(),
        head: model.head().to_string(),
        generator: model.generator.mode.to_string(),
        k_novel: config.eval_k_novel,
        shots: config.eval_shots,
        n_tasks: config.n_tasks,
        novel_acc,
        novel_ci95,
        base_acc,
        base_ci95,
        both_acc,
        both_ci95,
        config: run_config,
    })
}
