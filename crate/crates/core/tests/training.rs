mod common;

use common::*;
use fewshot_core::dataset::{generate, BaseViews, SynthConfig};
use fewshot_core::eval::base_views;
use fewshot_core::generator::{GeneratorMode, GeneratorParams};
use fewshot_core::model::{FeatureBank, FewShotModel};
use fewshot_core::pipeline::{make_dataset, run_stage1, run_stage2};
use fewshot_core::tensor::Param;
use fewshot_core::trainer::{
    base_train_accuracy, episode_loss_value, mean_episode_accuracy, stage1_train, stage2_train, Episode, TrainConfig,
};
use fewshot_core::{ExtractorConfig, HeadKind, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn values(params: Vec<&Param>) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.value.data().to_vec()).collect()
}

fn window_means(losses: &[f64], w: usize) -> (f64, f64) {
    let first = losses[..w].iter().sum::<f64>() / w as f64;
    let last = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (first, last)
}

#[test]
fn zero_rate_stage1_changes_nothing() {
    let mut cfg = small_config(0);
    cfg.train.s1_lr = 0.0;
    let d = make_dataset(&cfg).unwrap();
    let fresh = FewShotModel::init(cfg.extractor.clone(), HeadKind::Cosine, 12, GeneratorMode::AvgOnly, 0).unwrap();
    let (ck, _) = run_stage1(&cfg, &d).unwrap();
    assert_eq!(values(ck.model.all_params()), values(fresh.all_params()));
}

#[test]
fn stage1_is_reproducible_and_learns() {
    let cfg = small_config(1);
    let d = make_dataset(&cfg).unwrap();
    let (a, la) = run_stage1(&cfg, &d).unwrap();
    let (b, lb) = run_stage1(&cfg, &d).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(la.epochs, lb.epochs);
    let first = la.epochs.first().unwrap().loss;
    let last = la.epochs.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn separable_three_categories_reach_high_accuracy() {
    let d = generate(&SynthConfig {
        n_base: 3,
        n_val: 1,
        n_test: 1,
        examples_per_category: 40,
        input_dim: 6,
        noise_scale: 0.1,
        nuisance_strength: 0.0,
        superclasses: 0,
        ..Default::default()
    })
    .unwrap();
    let ext = ExtractorConfig {
        input_dim: 6,
        hidden_dims: vec![16],
        feature_dim: 6,
        ..Default::default()
    };
    let mut model = FewShotModel::init(ext, HeadKind::Cosine, 3, GeneratorMode::AvgOnly, 5).unwrap();
    let views = BaseViews::all(&d);
    let cfg = TrainConfig {
        s1_epochs: 30,
        s1_batch_size: 16,
        k_novel: 1,
        ..Default::default()
    };
    stage1_train(&mut model, &d, &views, &cfg, 5).unwrap();
    let acc = base_train_accuracy(&model, &d, &views).unwrap();
    assert!(acc >= 0.95, "training accuracy {acc}");
}

#[test]
fn trailing_loss_windows_decrease_in_both_stages() {
    let cfg = RunConfig::default();
    let d = make_dataset(&cfg).unwrap();
    let (s1, l1) = run_stage1(&cfg, &d).unwrap();
    let (_, l2) = run_stage2(&cfg, &d, &s1).unwrap();
    let (a, b) = window_means(&l1.step_losses, 50);
    assert!(b < a, "stage 1 {a} -> {b}");
    let (a, b) = window_means(&l2.step_losses, 50);
    assert!(b < a, "stage 2 {a} -> {b}");
}

#[test]
fn stage2_leaves_theta_bit_identical() {
    let cfg = small_config(2);
    let d = make_dataset(&cfg).unwrap();
    let (s1, _) = run_stage1(&cfg, &d).unwrap();
    let (s2, _) = run_stage2(&cfg, &d, &s1).unwrap();
    assert_eq!(s1.model.extractor_checksum(), s2.model.extractor_checksum());
    assert_eq!(values(s1.model.extractor.params()), values(s2.model.extractor.params()));
    assert_ne!(values(s1.model.generator.params()), values(s2.model.generator.params()));
}

#[test]
fn zero_rate_stage2_changes_nothing() {
    let mut cfg = small_config(3);
    let d = make_dataset(&cfg).unwrap();
    let (s1, _) = run_stage1(&cfg, &d).unwrap();
    cfg.train.s2_lr = 0.0;
    let (s2, _) = run_stage2(&cfg, &d, &s1).unwrap();
    assert_eq!(values(s1.model.all_params()), values(s2.model.all_params()));
}

#[test]
fn stage2_is_reproducible() {
    let cfg = small_config(4);
    let d = make_dataset(&cfg).unwrap();
    let (s1, _) = run_stage1(&cfg, &d).unwrap();
    let (a, la) = run_stage2(&cfg, &d, &s1).unwrap();
    let (b, lb) = run_stage2(&cfg, &d, &s1).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(la.step_losses, lb.step_losses);
}

#[test]
fn attention_memory_never_sees_fake_novel_rows() {
    let cfg = small_config(5);
    let d = make_dataset(&cfg).unwrap();
    let (s1, _) = run_stage1(&cfg, &d).unwrap();
    let views = base_views(&d, cfg.train.base_holdout).unwrap();
    let mut model = s1.model.clone();
    let mut seen = 0;
    let mut observer = |ep: &Episode, memory: &[usize]| {
        seen += 1;
        assert!(memory.iter().all(|b| !ep.fake_novel.contains(b)));
        assert_eq!(memory, ep.remaining_base().as_slice());
    };
    stage2_train(&mut model, &d, &views, &cfg.train, 5, Some(&mut observer)).unwrap();
    let expected = cfg.train.s2_epochs
        * cfg.train.s2_episodes_per_epoch.div_ceil(cfg.train.s2_episodes_per_batch)
        * cfg.train.s2_episodes_per_batch;
    assert_eq!(seen, expected);
}

#[test]
fn trained_generator_beats_averaging_on_held_out_episodes() {
    let cfg = RunConfig::default();
    let d = make_dataset(&cfg).unwrap();
    let (s1, _) = run_stage1(&cfg, &d).unwrap();
    let (s2, _) = run_stage2(&cfg, &d, &s1).unwrap();
    let views = base_views(&d, cfg.train.base_holdout).unwrap();
    let one_shot = TrainConfig {
        shots: vec![1],
        ..cfg.train.clone()
    };
    let before = mean_episode_accuracy(&s1.model, &d, &views, &one_shot, 400, 77).unwrap();
    let after = mean_episode_accuracy(&s2.model, &d, &views, &one_shot, 400, 77).unwrap();
    assert!(after >= before, "{before} -> {after}");
}

/// Three base categories, a random model, and the episode
/// `fake_novel = [1]`, one support row, one novel query.
fn tiny_setup(head: HeadKind, seed: u64) -> (fewshot_core::Dataset, FewShotModel, Episode) {
    let d = generate(&SynthConfig {
        n_base: 3,
        n_val: 1,
        n_test: 1,
        examples_per_category: 4,
        input_dim: 3,
        seed,
        ..Default::default()
    })
    .unwrap();
    let ext = ExtractorConfig {
        input_dim: 3,
        hidden_dims: vec![4],
        feature_dim: 3,
        ..Default::default()
    };
    let mut model = FewShotModel::init(ext, head, 3, GeneratorMode::AvgPlusAttention, seed).unwrap();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let g: &mut GeneratorParams = &mut model.generator;
    g.phi_avg.value = Tensor::vector(randn(3));
    g.phi_att.value = Tensor::vector(randn(3));
    g.phi_q.value = Tensor::matrix(3, 3, randn(9)).unwrap();
    g.keys.value = Tensor::matrix(3, 3, randn(9)).unwrap();
    g.gamma.value = Tensor::scalar(2.5);
    model.classifier.tau.value = Tensor::scalar(4.0);
    let ep = Episode {
        fake_novel: vec![1],
        support: vec![vec![0]],
        query_novel: vec![(0, 2)],
        query_base: vec![],
        exclusion_mask: vec![false, true, false],
    };
    (d, model, ep)
}

/// Plain forward pass of the extractor.
fn features(model: &FewShotModel, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = model.extractor.layers.len() - 1;
    for (i, layer) in model.extractor.layers.iter().enumerate() {
        let w = &layer.weight.value;
        h = (0..w.rows())
            .map(|o| dot(w.row(o), &h) + layer.bias.value.data()[o])
            .map(|v| if i < last { v.max(0.0) } else { v })
            .collect();
    }
    h
}

#[test]
fn tiny_episode_loss_matches_hand_assembled_chain() {
    for (head, seed) in [(HeadKind::Cosine, 11), (HeadKind::Cosine, 12), (HeadKind::Dot, 13)] {
        let (d, model, ep) = tiny_setup(head, seed);
        let bank = FeatureBank::compute(&model.extractor, &d, &d.split.base).unwrap();
        let got = episode_loss_value(&model, &d, &bank, &ep).unwrap();

        let base_cat = |b: usize| d.split.base[b];
        let support = vec![features(&model, d.example(base_cat(1), 0))];
        let query = features(&model, d.example(base_cat(1), 2));
        let w = &model.classifier.base_weights.value;
        let base: Vec<Vec<f64>> = (0..3).map(|b| w.row(b).to_vec()).collect();
        let keys: Vec<Vec<f64>> = (0..3).map(|b| model.generator.keys.value.row(b).to_vec()).collect();
        let phi_q: Vec<Vec<f64>> = (0..3).map(|i| model.generator.phi_q.value.row(i).to_vec()).collect();
        let oracle = GenOracle {
            phi_avg: model.generator.phi_avg.value.data(),
            phi_att: model.generator.phi_att.value.data(),
            phi_q: &phi_q,
            keys: &keys,
            gamma: 2.5,
        };
        let generated = oracle.generate(&support, &base, &[1], true);
        let w_star = vec![base[0].clone(), base[2].clone(), generated];
        let p = probs(&query, &w_star, head == HeadKind::Cosine, 4.0);
        let want = -(p[2] + 1e-12).ln();
        assert!((got - want).abs() < 1e-10, "{head}: {got} vs {want}");
    }
}

#[test]
fn flat_scores_give_log_k_loss() {
    let (d, mut model, mut ep) = tiny_setup(HeadKind::Cosine, 21);
    model.classifier.tau.value = Tensor::scalar(0.0);
    ep.query_base = vec![(0, 1), (2, 3)];
    let bank = FeatureBank::compute(&model.extractor, &d, &d.split.base).unwrap();
    let loss = episode_loss_value(&model, &d, &bank, &ep).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-9, "{loss}");
}

#[test]
fn confident_correct_scores_give_near_zero_loss() {
    let (d, mut model, ep) = tiny_setup(HeadKind::Cosine, 31);
    let bank = FeatureBank::compute(&model.extractor, &d, &d.split.base).unwrap();
    // The query is its own support: generated row points straight at it.
    let ep = Episode {
        query_novel: vec![(0, 0)],
        ..ep
    };
    model.generator.phi_avg.value = Tensor::full(&[3], 1.0);
    model.generator.phi_att.value = Tensor::zeros(&[3]);
    model.classifier.tau.value = Tensor::scalar(500.0);
    let loss = episode_loss_value(&model, &d, &bank, &ep).unwrap();
    assert!(loss < 1e-6, "{loss}");
}
