//! Two-stage training.
//!
//! Stage 1 learns θ, `W_base` and τ by plain classification of the base
//! categories. Stage 2 freezes θ and trains φ (continuing `W_base` and τ) on
//! episodes in which a few base categories play the role of novel ones:
//! their weights are produced by the generator from a handful of support
//! examples, and their rows are hidden from the attention memory.

use std::fmt;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{scores, HeadKind};
use crate::config::{parse_list, parse_value, render_list, KvSection};
use crate::dataset::{BaseViews, Dataset, ExampleRef};
use crate::error::{Error, Result};
use crate::generator::{build_memory, generate, GeneratorMode, GeneratorParams};
use crate::model::{FeatureBank, FewShotModel};
use crate::optim::Sgd;
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var, LOG_EPS};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub generator: GeneratorMode,
    pub s1_lr: f64,
    pub s1_momentum: f64,
    pub s1_weight_decay: f64,
    pub s1_epochs: usize,
    pub s1_batch_size: usize,
    /// Factor applied to the stage-1 rate from two thirds of the epochs on.
    pub s1_lr_decay: f64,
    pub s2_lr: f64,
    pub s2_momentum: f64,
    pub s2_weight_decay: f64,
    pub s2_epochs: usize,
    pub s2_episodes_per_epoch: usize,
    pub s2_episodes_per_batch: usize,
    /// Dropout on the (frozen) features during stage 2.
    pub s2_dropout: f64,
    pub k_novel: usize,
    /// `N'` is drawn uniformly from this set for every episode.
    pub shots: Vec<usize>,
    pub t_novel_per_category: usize,
    /// Base queries per episode; 0 means as many as novel queries.
    pub t_base: usize,
    /// Base examples per category held out for base-accuracy evaluation.
    pub base_holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Cosine,
            generator: GeneratorMode::AvgPlusAttention,
            s1_lr: 0.1,
            s1_momentum: 0.9,
            s1_weight_decay: 5e-4,
            s1_epochs: 30,
            s1_batch_size: 64,
            s1_lr_decay: 0.1,
            s2_lr: 0.1,
            s2_momentum: 0.9,
            s2_weight_decay: 5e-4,
            s2_epochs: 40,
            s2_episodes_per_epoch: 200,
            s2_episodes_per_batch: 8,
            s2_dropout: 0.5,
            k_novel: 5,
            shots: vec![1, 5],
            t_novel_per_category: 6,
            t_base: 60,
            base_holdout: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k_base: usize) -> Result<()> {
        if self.k_novel == 0 || self.k_novel >= k_base {
            return Err(Error::Config(format!(
                "k_novel = {} must satisfy 0 < k_novel < K_base = {k_base}",
                self.k_novel
            )));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots must be a nonempty list of positive counts".into()));
        }
        if self.s1_batch_size == 0 || self.s2_episodes_per_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.s2_dropout) {
            return Err(Error::Config("s2_dropout must lie in [0, 1)".into()));
        }
        if self.t_novel_per_category == 0 {
            return Err(Error::Config("t_novel_per_category must be positive".into()));
        }
        Ok(())
    }

    pub fn t_base_total(&self) -> usize {
        if self.t_base == 0 {
            self.k_novel * self.t_novel_per_category
        } else {
            self.t_base
        }
    }

    fn max_shots(&self) -> usize {
        self.shots.iter().copied().max().unwrap_or(1)
    }

    /// Stage-1 learning rate for a 0-based epoch.
    pub fn s1_lr_at(&self, epoch: usize) -> f64 {
        if 3 * epoch >= 2 * self.s1_epochs {
            self.s1_lr * self.s1_lr_decay
        } else {
            self.s1_lr
        }
    }
}

impl KvSection for TrainConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "head" => self.head = value.parse()?,
            "generator" => self.generator = value.parse()?,
            "s1_lr" => self.s1_lr = parse_value(key, value)?,
            "s1_momentum" => self.s1_momentum = parse_value(key, value)?,
            "s1_weight_decay" => self.s1_weight_decay = parse_value(key, value)?,
            "s1_epochs" => self.s1_epochs = parse_value(key, value)?,
            "s1_batch_size" => self.s1_batch_size = parse_value(key, value)?,
            "s1_lr_decay" => self.s1_lr_decay = parse_value(key, value)?,
            "s2_lr" => self.s2_lr = parse_value(key, value)?,
            "s2_momentum" => self.s2_momentum = parse_value(key, value)?,
            "s2_weight_decay" => self.s2_weight_decay = parse_value(key, value)?,
            "s2_epochs" => self.s2_epochs = parse_value(key, value)?,
            "s2_episodes_per_epoch" => self.s2_episodes_per_epoch = parse_value(key, value)?,
            "s2_episodes_per_batch" => self.s2_episodes_per_batch = parse_value(key, value)?,
            "s2_dropout" => self.s2_dropout = parse_value(key, value)?,
            "k_novel" => self.k_novel = parse_value(key, value)?,
            "shots" => self.shots = parse_list(key, value)?,
            "t_novel_per_category" => self.t_novel_per_category = parse_value(key, value)?,
            "t_base" => self.t_base = parse_value(key, value)?,
            "base_holdout" => self.base_holdout = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("head", self.head.to_string()),
            ("generator", self.generator.to_string()),
            ("s1_lr", self.s1_lr.to_string()),
            ("s1_momentum", self.s1_momentum.to_string()),
            ("s1_weight_decay", self.s1_weight_decay.to_string()),
            ("s1_epochs", self.s1_epochs.to_string()),
            ("s1_batch_size", self.s1_batch_size.to_string()),
            ("s1_lr_decay", self.s1_lr_decay.to_string()),
            ("s2_lr", self.s2_lr.to_string()),
            ("s2_momentum", self.s2_momentum.to_string()),
            ("s2_weight_decay", self.s2_weight_decay.to_string()),
            ("s2_epochs", self.s2_epochs.to_string()),
            ("s2_episodes_per_epoch", self.s2_episodes_per_epoch.to_string()),
            ("s2_episodes_per_batch", self.s2_episodes_per_batch.to_string()),
            ("s2_dropout", self.s2_dropout.to_string()),
            ("k_novel", self.k_novel.to_string()),
            ("shots", render_list(&self.shots)),
            ("t_novel_per_category", self.t_novel_per_category.to_string()),
            ("t_base", self.t_base.to_string()),
            ("base_holdout", self.base_holdout.to_string()),
        ]
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u32,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub tau: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage {} epoch {:>3}  lr {:.4}  loss {:.5}  tau {:.3}",
            self.stage, self.epoch, self.lr, self.loss, self.tau
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_tau(model: &FewShotModel) -> Result<()> {
    let tau = model.classifier.tau.value.item();
    if model.head() == HeadKind::Cosine && !(tau > 0.0) {
        return Err(Error::Diverged(format!("temperature left the positive range: {tau}")));
    }
    Ok(())
}

/// Mean cross-entropy of a base-classification batch; θ trainable.
fn stage1_batch_loss<R: Rng + ?Sized>(
    model: &mut FewShotModel,
    dataset: &Dataset,
    batch: &[(usize, usize)],
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ev = model.extractor.bind(&mut tape, true);
    let cv = model.classifier.bind(&mut tape, true);
    let refs: Vec<ExampleRef> = batch
        .iter()
        .map(|&(b, i)| ExampleRef {
            category: dataset.split.base[b],
            index: i,
        })
        .collect();
    let labels: Vec<usize> = batch.iter().map(|&(b, _)| b).collect();
    let x = tape.constant(dataset.batch(&refs)?);
    let z = model.extractor.forward(&mut tape, &ev, x, true, rng)?;
    let s = scores(&mut tape, model.head(), z, cv.base, cv.tau)?;
    let p = tape.softmax(s)?;
    let loss = tape.cross_entropy(p, &labels, LOG_EPS)?;
    tape.backward(loss)?;
    model.extractor.pull_grads(&tape, &ev);
    model.classifier.pull_grads(&tape, &cv);
    Ok(tape.value(loss).item())
}

/// Stage 1: θ, `W_base`, τ on the base training pool. Afterwards the
/// generator is re-initialized from the learned base weights.
pub fn stage1_train(
    model: &mut FewShotModel,
    dataset: &Dataset,
    views: &BaseViews,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let pool: Vec<(usize, usize)> = views
        .train
        .iter()
        .enumerate()
        .flat_map(|(b, rows)| rows.iter().map(move |&i| (b, i)))
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if views.train.len() != model.classifier.k_base() {
        return Err(Error::Config(format!(
            "model has {} base rows, dataset {} base categories",
            model.classifier.k_base(),
            views.train.len()
        )));
    }
    let rng = &mut stream(seed, Stream::Stage1);
    let mut log = TrainLog::default();
    let mut order = pool;
    for epoch in 0..config.s1_epochs {
        let sgd = Sgd {
            lr: config.s1_lr_at(epoch),
            momentum: config.s1_momentum,
            weight_decay: config.s1_weight_decay,
        };
        order.shuffle(rng);
        let mut total = 0.0;
        let mut n = 0;
        for batch in order.chunks(config.s1_batch_size) {
            let loss = stage1_batch_loss(model, dataset, batch, rng)?;
            let mut params = model.extractor.params_mut();
            params.extend(model.classifier.trainable_params_mut());
            sgd.step(&mut params)?;
            check_tau(model)?;
            log.step_losses.push(loss);
            total += loss;
            n += 1;
        }
        log.epochs.push(EpochRecord {
            stage: 1,
            epoch,
            lr: sgd.lr,
            loss: total / n as f64,
            tau: model.classifier.tau.value.item(),
        });
    }
    model.generator = GeneratorParams::init(&model.classifier.base_weights.value, model.generator.mode);
    Ok(log)
}

/// A stage-2 training episode over base indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Base indices treated as novel, in generated-row order.
    pub fake_novel: Vec<usize>,
    /// Support rows (within the category) per fake-novel category.
    pub support: Vec<Vec<usize>>,
    /// `(position in fake_novel, row)`.
    pub query_novel: Vec<(usize, usize)>,
    /// `(base index, row)` from the remaining base categories.
    pub query_base: Vec<(usize, usize)>,
    /// `true` on exactly the fake-novel base rows.
    pub exclusion_mask: Vec<bool>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, |s| s.len())
    }

    /// Base indices that stay in `W*`, ascending.
    pub fn remaining_base(&self) -> Vec<usize> {
        (0..self.exclusion_mask.len())
            .filter(|&b| !self.exclusion_mask[b])
            .collect()
    }

    /// Labels in `W* = [remaining base rows; generated rows]` for
    /// `query_novel` followed by `query_base`.
    pub fn labels(&self) -> Vec<usize> {
        let remaining = self.remaining_base();
        let mut pos = vec![usize::MAX; self.exclusion_mask.len()];
        for (i, &b) in remaining.iter().enumerate() {
            pos[b] = i;
        }
        self.query_novel
            .iter()
            .map(|&(k, _)| remaining.len() + k)
            .chain(self.query_base.iter().map(|&(b, _)| pos[b]))
            .collect()
    }
}

/// Draws one episode from the base training pool.
pub fn sample_episode<R: Rng + ?Sized>(
    views: &BaseViews,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Episode> {
    let k_base = views.train.len();
    config.validate(k_base)?;
    let shots = *config.shots.choose(rng).expect("nonempty shots");
    let need = shots + config.t_novel_per_category;
    let fake_novel: Vec<usize> = index::sample(rng, k_base, config.k_novel).into_vec();
    let mut support = Vec::with_capacity(fake_novel.len());
    let mut query_novel = Vec::new();
    for (k, &b) in fake_novel.iter().enumerate() {
        let rows = &views.train[b];
        if rows.len() < need.max(config.max_shots() + 1) {
            return Err(Error::InsufficientExamples {
                category: b,
                available: rows.len(),
                required: need.max(config.max_shots() + 1),
            });
        }
        let picked = index::sample(rng, rows.len(), need).into_vec();
        support.push(picked[..shots].iter().map(|&i| rows[i]).collect());
        query_novel.extend(picked[shots..].iter().map(|&i| (k, rows[i])));
    }
    let mut exclusion_mask = vec![false; k_base];
    for &b in &fake_novel {
        exclusion_mask[b] = true;
    }
    let pool: Vec<(usize, usize)> = (0..k_base)
        .filter(|&b| !exclusion_mask[b])
        .flat_map(|b| views.train[b].iter().map(move |&i| (b, i)))
        .collect();
    let t_base = config.t_base_total();
    if pool.len() < t_base {
        return Err(Error::InsufficientExamples {
            category: usize::MAX,
            available: pool.len(),
            required: t_base,
        });
    }
    let query_base = index::sample(rng, pool.len(), t_base)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(Episode {
        fake_novel,
        support,
        query_novel,
        query_base,
        exclusion_mask,
    })
}

/// Tape handles for everything stage 2 trains.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeVars {
    pub classifier: crate::classifier::ClassifierVars,
    pub generator: crate::generator::GeneratorVars,
}

pub struct EpisodeLoss {
    pub loss: Var,
    /// Base indices visible to the attention memory (empty for avg-only).
    pub memory_rows: Vec<usize>,
}

fn base_ref(dataset: &Dataset, b: usize, row: usize) -> ExampleRef {
    ExampleRef {
        category: dataset.split.base[b],
        index: row,
    }
}

/// Builds the episode objective on `tape`: generated weights for the fake
/// novel categories, `W*` = remaining base rows then generated rows, mean
/// cross-entropy over every query.
pub fn episode_loss(
    tape: &mut Tape,
    model: &FewShotModel,
    vars: &EpisodeVars,
    dataset: &Dataset,
    bank: &FeatureBank,
    episode: &Episode,
    mut dropout: Option<(f64, &mut crate::rng::Rng)>,
) -> Result<EpisodeLoss> {
    let mut features = |tape: &mut Tape, t: Tensor| -> Result<Var> {
        let v = tape.constant(t);
        match dropout.as_mut() {
            Some((p, rng)) => tape.dropout(v, *p, &mut **rng, true),
            None => Ok(v),
        }
    };
    let mode = model.generator.mode;
    let memory = match mode {
        GeneratorMode::AvgOnly => None,
        GeneratorMode::AvgPlusAttention => Some(build_memory(
            tape,
            vars.classifier.base,
            vars.generator.keys,
            &episode.fake_novel,
        )?),
    };
    let mut generated = Vec::with_capacity(episode.fake_novel.len());
    for (&b, rows) in episode.fake_novel.iter().zip(&episode.support) {
        let refs: Vec<ExampleRef> = rows.iter().map(|&i| base_ref(dataset, b, i)).collect();
        let z = features(tape, bank.gather(&refs)?)?;
        generated.push(generate(tape, &vars.generator, mode, z, memory.as_ref())?);
    }
    let remaining = episode.remaining_base();
    let w_rem = tape.select_rows(vars.classifier.base, &remaining)?;
    let mut parts = vec![w_rem];
    parts.extend(generated);
    let w_star = tape.concat_rows(&parts)?;

    let queries: Vec<ExampleRef> = episode
        .query_novel
        .iter()
        .map(|&(k, i)| base_ref(dataset, episode.fake_novel[k], i))
        .chain(episode.query_base.iter().map(|&(b, i)| base_ref(dataset, b, i)))
        .collect();
    let zq = features(tape, bank.gather(&queries)?)?;
    let s = scores(tape, model.head(), zq, w_star, vars.classifier.tau)?;
    let p = tape.softmax(s)?;
    let loss = tape.cross_entropy(p, &episode.labels(), LOG_EPS)?;
    Ok(EpisodeLoss {
        loss,
        memory_rows: memory.map(|m| m.rows).unwrap_or_default(),
    })
}

/// Value of the episode objective with frozen parameters.
pub fn episode_loss_value(
    model: &FewShotModel,
    dataset: &Dataset,
    bank: &FeatureBank,
    episode: &Episode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = EpisodeVars {
        classifier: model.classifier.bind(&mut tape, false),
        generator: model.generator.bind(&mut tape, false),
    };
    let out = episode_loss(&mut tape, model, &vars, dataset, bank, episode, None)?;
    Ok(tape.value(out.loss).item())
}

/// Fraction of fake-novel queries whose argmax over `W*` is their own row.
pub fn episode_novel_accuracy(
    model: &FewShotModel,
    dataset: &Dataset,
    bank: &FeatureBank,
    episode: &Episode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = EpisodeVars {
        classifier: model.classifier.bind(&mut tape, false),
        generator: model.generator.bind(&mut tape, false),
    };
    let mode = model.generator.mode;
    let memory = match mode {
        GeneratorMode::AvgOnly => None,
        GeneratorMode::AvgPlusAttention => Some(build_memory(
            &mut tape,
            vars.classifier.base,
            vars.generator.keys,
            &episode.fake_novel,
        )?),
    };
    let mut generated = Vec::new();
    for (&b, rows) in episode.fake_novel.iter().zip(&episode.support) {
        let refs: Vec<ExampleRef> = rows.iter().map(|&i| base_ref(dataset, b, i)).collect();
        let z = tape.constant(bank.gather(&refs)?);
        generated.push(generate(&mut tape, &vars.generator, mode, z, memory.as_ref())?);
    }
    let w_novel = tape.concat_rows(&generated)?;
    let refs: Vec<ExampleRef> = episode
        .query_novel
        .iter()
        .map(|&(k, i)| base_ref(dataset, episode.fake_novel[k], i))
        .collect();
    let zq = tape.constant(bank.gather(&refs)?);
    let s = scores(&mut tape, model.head(), zq, w_novel, vars.classifier.tau)?;
    let sv = tape.value(s);
    let correct = episode
        .query_novel
        .iter()
        .enumerate()
        .filter(|&(i, &(k, _))| crate::classifier::argmax(sv.row(i)) == k)
        .count();
    Ok(correct as f64 / episode.query_novel.len() as f64)
}

/// Stage 2: θ frozen; φ, `W_base` and τ trained on episodes.
///
/// `observer` sees every episode together with the base rows that were
/// visible to the attention memory.
pub fn stage2_train(
    model: &mut FewShotModel,
    dataset: &Dataset,
    views: &BaseViews,
    config: &TrainConfig,
    seed: u64,
    mut observer: Option<&mut dyn FnMut(&Episode, &[usize])>,
) -> Result<TrainLog> {
    config.validate(model.classifier.k_base())?;
    model.generator.mode = config.generator;
    for p in model
        .classifier
        .trainable_params_mut()
        .into_iter()
        .chain(model.generator.trainable_params_mut())
    {
        p.reset_velocity();
        p.zero_grad();
    }
    let bank = FeatureBank::compute(&model.extractor, dataset, &dataset.split.base)?;
    let rng = &mut stream(seed, Stream::Stage2);
    let sgd = Sgd {
        lr: config.s2_lr,
        momentum: config.s2_momentum,
        weight_decay: config.s2_weight_decay,
    };
    let mut log = TrainLog::default();
    let batches_per_epoch = config
        .s2_episodes_per_epoch
        .div_ceil(config.s2_episodes_per_batch);
    for epoch in 0..config.s2_epochs {
        let mut total = 0.0;
        for _ in 0..batches_per_epoch {
            let episodes: Vec<Episode> = (0..config.s2_episodes_per_batch)
                .map(|_| sample_episode(views, config, rng))
                .collect::<Result<_>>()?;
            let mut batch_loss = 0.0;
            for ep in &episodes {
                let mut tape = Tape::new();
                let vars = EpisodeVars {
                    classifier: model.classifier.bind(&mut tape, true),
                    generator: model.generator.bind(&mut tape, true),
                };
                let drop = (config.s2_dropout > 0.0).then_some((config.s2_dropout, &mut *rng));
                let out = episode_loss(&mut tape, model, &vars, dataset, &bank, ep, drop)?;
                if let Some(obs) = observer.as_mut() {
                    obs(ep, &out.memory_rows);
                }
                let scaled = tape.scale(out.loss, 1.0 / episodes.len() as f64)?;
                tape.backward(scaled)?;
                model.classifier.pull_grads(&tape, &vars.classifier);
                model.generator.pull_grads(&tape, &vars.generator);
                batch_loss += tape.value(out.loss).item() / episodes.len() as f64;
            }
            let mut params: Vec<&mut Param> = model.classifier.trainable_params_mut();
            params.extend(model.generator.trainable_params_mut());
            sgd.step(&mut params)?;
            check_tau(model)?;
            log.step_losses.push(batch_loss);
            total += batch_loss;
        }
        log.epochs.push(EpochRecord {
            stage: 2,
            epoch,
            lr: sgd.lr,
            loss: total / batches_per_epoch as f64,
            tau: model.classifier.tau.value.item(),
        });
    }
    Ok(log)
}

/// Mean over `n` held-out episodes of [`episode_novel_accuracy`].
pub fn mean_episode_accuracy(
    model: &FewShotModel,
    dataset: &Dataset,
    views: &BaseViews,
    config: &TrainConfig,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let bank = FeatureBank::compute(&model.extractor, dataset, &dataset.split.base)?;
    let rng = &mut stream(seed ^ 0x5eed_0ff5, Stream::Stage2);
    let mut total = 0.0;
    for _ in 0..n {
        let ep = sample_episode(views, config, rng)?;
        total += episode_novel_accuracy(model, dataset, &bank, &ep)?;
    }
    Ok(total / n as f64)
}

/// Convenience: training accuracy of the base classifier over `views.train`.
pub fn base_train_accuracy(model: &FewShotModel, dataset: &Dataset, views: &BaseViews) -> Result<f64> {
    let bank = FeatureBank::compute(&model.extractor, dataset, &dataset.split.base)?;
    let w = &model.classifier.base_weights.value;
    let tau = model.classifier.tau.value.item();
    let mut correct = 0;
    let mut total = 0;
    for (b, rows) in views.train.iter().enumerate() {
        let refs: Vec<ExampleRef> = rows.iter().map(|&i| base_ref(dataset, b, i)).collect();
        let z = bank.gather(&refs)?;
        let p = crate::classifier::classify_with(&z, w, model.head(), tau)?;
        for i in 0..p.rows() {
            correct += usize::from(crate::classifier::argmax(p.row(i)) == b);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[allow(dead_code)]
fn _assert_tensor_send_sync() {
    fn is<T: Send + Sync>() {}
    is::<Tensor>();
    is::<FewShotModel>();
}
