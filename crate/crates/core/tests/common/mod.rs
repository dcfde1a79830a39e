//! Independent reference routines and checkers shared by the integration
//! tests. Plain loops over `Vec<f64>`; nothing here goes through the tape.

#![allow(dead_code)]

use std::collections::HashSet;

use fewshot_core::dataset::{BaseViews, Dataset, SplitKind};
use fewshot_core::eval::{EvalConfig, FewShotTask};
use fewshot_core::trainer::{Episode, TrainConfig};
use fewshot_core::RunConfig;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a).max(1e-12);
    a.iter().map(|x| x / n).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(&unit(a), &unit(b))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Term-by-term double sum over support rows and base rows.
pub fn attention_oracle(
    support: &[Vec<f64>],
    base: &[Vec<f64>],
    keys: &[Vec<f64>],
    phi_q: &[Vec<f64>],
    gamma: f64,
) -> Vec<f64> {
    let d = base[0].len();
    let mut out = vec![0.0; d];
    for z in support {
        let zn = unit(z);
        let q: Vec<f64> = phi_q.iter().map(|row| dot(row, &zn)).collect();
        let logits: Vec<f64> = keys.iter().map(|k| gamma * cos(&q, k)).collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for (b, w) in base.iter().enumerate() {
            let a = logits[b].exp() / denom;
            let wn = unit(w);
            for j in 0..d {
                out[j] += a * wn[j] / support.len() as f64;
            }
        }
    }
    out
}

pub fn avg_oracle(support: &[Vec<f64>]) -> Vec<f64> {
    let d = support[0].len();
    let mut out = vec![0.0; d];
    for z in support {
        let zn = unit(z);
        for j in 0..d {
            out[j] += zn[j] / support.len() as f64;
        }
    }
    out
}

pub struct GenOracle<'a> {
    pub phi_avg: &'a [f64],
    pub phi_att: &'a [f64],
    pub phi_q: &'a [Vec<f64>],
    pub keys: &'a [Vec<f64>],
    pub gamma: f64,
}

impl GenOracle<'_> {
    /// Generated weight with base rows in `hidden` removed from memory.
    pub fn generate(&self, support: &[Vec<f64>], base: &[Vec<f64>], hidden: &[usize], attention: bool) -> Vec<f64> {
        let avg = avg_oracle(support);
        let mut out: Vec<f64> = avg.iter().zip(self.phi_avg).map(|(a, p)| a * p).collect();
        if attention {
            let keep: Vec<usize> = (0..base.len()).filter(|b| !hidden.contains(b)).collect();
            let bw: Vec<Vec<f64>> = keep.iter().map(|&b| base[b].clone()).collect();
            let bk: Vec<Vec<f64>> = keep.iter().map(|&b| self.keys[b].clone()).collect();
            let att = attention_oracle(support, &bw, &bk, self.phi_q, self.gamma);
            for j in 0..out.len() {
                out[j] += self.phi_att[j] * att[j];
            }
        }
        out
    }
}

/// Softmax probabilities of one feature against weight rows.
pub fn probs(z: &[f64], rows: &[Vec<f64>], cosine: bool, tau: f64) -> Vec<f64> {
    let s: Vec<f64> = rows
        .iter()
        .map(|w| if cosine { tau * cos(z, w) } else { dot(z, w) })
        .collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

fn has_duplicates<T: std::hash::Hash + Eq + Copy>(xs: impl IntoIterator<Item = T>) -> bool {
    let mut seen = HashSet::new();
    xs.into_iter().any(|x| !seen.insert(x))
}

/// Every broken episode invariant, as text.
pub fn episode_violations(ep: &Episode, views: &BaseViews, cfg: &TrainConfig) -> Vec<String> {
    let mut v = Vec::new();
    let k_base = views.train.len();
    if ep.fake_novel.len() != cfg.k_novel {
        v.push(format!("{} fake-novel categories", ep.fake_novel.len()));
    }
    if has_duplicates(ep.fake_novel.iter().copied()) {
        v.push("repeated fake-novel category".into());
    }
    if ep.fake_novel.iter().any(|&b| b >= k_base) {
        v.push("fake-novel id out of range".into());
    }
    if ep.exclusion_mask.len() != k_base {
        v.push("mask length".into());
    }
    for b in 0..k_base.min(ep.exclusion_mask.len()) {
        if ep.exclusion_mask[b] != ep.fake_novel.contains(&b) {
            v.push(format!("mask wrong at {b}"));
        }
    }
    let shots = ep.support.first().map_or(0, Vec::len);
    if !cfg.shots.contains(&shots) {
        v.push(format!("shot count {shots}"));
    }
    if ep.support.len() != ep.fake_novel.len() {
        v.push("support count".into());
    }
    for (k, rows) in ep.support.iter().enumerate() {
        if rows.len() != shots {
            v.push("ragged support".into());
        }
        if has_duplicates(rows.iter().copied()) {
            v.push("repeated support row".into());
        }
        let b = ep.fake_novel[k];
        if rows.iter().any(|r| !views.train[b].contains(r)) {
            v.push("support outside the training pool".into());
        }
        let queries: Vec<usize> = ep.query_novel.iter().filter(|q| q.0 == k).map(|q| q.1).collect();
        if queries.len() != cfg.t_novel_per_category {
            v.push(format!("{} novel queries for slot {k}", queries.len()));
        }
        if queries.iter().any(|q| rows.contains(q)) {
            v.push("support and novel query overlap".into());
        }
        if queries.iter().any(|q| !views.train[b].contains(q)) {
            v.push("novel query outside the training pool".into());
        }
    }
    if has_duplicates(ep.query_novel.iter().copied()) {
        v.push("repeated novel query".into());
    }
    if ep.query_novel.iter().any(|q| q.0 >= ep.fake_novel.len()) {
        v.push("novel query slot out of range".into());
    }
    if ep.query_base.len() != cfg.t_base_total() {
        v.push(format!("{} base queries", ep.query_base.len()));
    }
    if has_duplicates(ep.query_base.iter().copied()) {
        v.push("repeated base query".into());
    }
    for &(b, r) in &ep.query_base {
        if ep.fake_novel.contains(&b) {
            v.push(format!("base query from fake-novel category {b}"));
        }
        if b >= k_base || !views.train[b].contains(&r) {
            v.push("base query outside the training pool".into());
        }
    }
    v
}

/// Every broken task invariant, as text.
pub fn task_violations(task: &FewShotTask, dataset: &Dataset, views: &BaseViews, cfg: &EvalConfig) -> Vec<String> {
    let mut v = Vec::new();
    let pool = dataset.split.get(cfg.eval_split);
    if task.novel.len() != cfg.eval_k_novel {
        v.push("novel count".into());
    }
    if has_duplicates(task.novel.iter().copied()) {
        v.push("repeated novel category".into());
    }
    for c in &task.novel {
        if !pool.contains(c) {
            v.push(format!("category {c} not in the evaluation split"));
        }
        if dataset.split.base.contains(c) {
            v.push(format!("novel category {c} is a base category"));
        }
    }
    for (k, rows) in task.support.iter().enumerate() {
        if rows.len() != cfg.eval_shots || has_duplicates(rows.iter().copied()) {
            v.push("support shape".into());
        }
        let c = task.novel[k];
        if rows.iter().any(|&r| r >= dataset.count(c)) {
            v.push("support row out of range".into());
        }
        let queries: Vec<usize> = task.query_novel.iter().filter(|q| q.0 == k).map(|q| q.1).collect();
        if queries.len() != cfg.test_novel_per_category {
            v.push("novel query count".into());
        }
        if queries.iter().any(|q| rows.contains(q)) {
            v.push("support and test overlap".into());
        }
    }
    if has_duplicates(task.query_novel.iter().copied()) {
        v.push("repeated novel query".into());
    }
    if has_duplicates(task.query_base.iter().copied()) {
        v.push("repeated base query".into());
    }
    for &(b, r) in &task.query_base {
        if b >= views.test.len() || !views.test[b].contains(&r) {
            v.push("base query outside the held-out pool".into());
        }
        if views.train[b].contains(&r) {
            v.push("base query seen in training".into());
        }
        if task.novel.contains(&dataset.split.base[b]) {
            v.push("base query category is novel".into());
        }
    }
    v
}

pub fn split_pools_are_disjoint(dataset: &Dataset) -> bool {
    let all: Vec<usize> = [SplitKind::Base, SplitKind::ValNovel, SplitKind::TestNovel]
        .iter()
        .flat_map(|&k| dataset.split.get(k).iter().copied())
        .collect();
    !has_duplicates(all.iter().copied()) && all.len() == dataset.n_categories()
}

/// A configuration small enough for training tests to run in seconds.
pub fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("seed", seed.to_string()),
        ("n_base", "12".into()),
        ("n_val", "3".into()),
        ("n_test", "6".into()),
        ("examples_per_category", "30".into()),
        ("superclasses", "3".into()),
        ("input_dim", "8".into()),
        ("hidden_dims", "16".into()),
        ("feature_dim", "8".into()),
        ("s1_epochs", "6".into()),
        ("s1_batch_size", "32".into()),
        ("s2_epochs", "3".into()),
        ("s2_episodes_per_epoch", "32".into()),
        ("k_novel", "3".into()),
        ("t_novel_per_category", "3".into()),
        ("t_base", "0".into()),
        ("base_holdout", "5".into()),
        ("n_tasks", "40".into()),
        ("eval_k_novel", "3".into()),
        ("test_novel_per_category", "5".into()),
        ("test_base", "15".into()),
    ] {
        c.set(k, &v).unwrap();
    }
    c.validate().unwrap();
    c
}
