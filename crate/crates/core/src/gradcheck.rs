//! Reverse-mode gradients against central finite differences.
//!
//! Every check draws random instances, reduces non-scalar outputs with a
//! random weighting, and compares each input coordinate of the tape
//! gradient with `(f(x + h) - f(x - h)) / 2h`.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classifier::{cosine_scores, dot_scores, ClassifierVars, HeadKind};
use crate::dataset::{generate as generate_dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::base_views;
use crate::extractor::{Extractor, ExtractorConfig, ExtractorVars};
use crate::generator::{build_memory, generate, GeneratorMode, GeneratorVars};
use crate::model::{FeatureBank, FewShotModel};
use crate::rng::{stream, Stream};
use crate::tape::{OpKind, Tape, Var, LOG_EPS, NORM_EPS};
use crate::tensor::Tensor;
use crate::trainer::{episode_loss, sample_episode, EpisodeVars, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Differences below this are accepted whatever their relative size.
    pub abs_floor: f64,
    pub seed: u64,
    /// Test hook: perturb the adjoint of every node of this kind.
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

/// Central differences of `f` at `x`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

/// `|a - n| / max(|a|, |n|, floor / tol)`; at most `tol` exactly when the
/// pair passes either the relative or the absolute test.
pub fn scaled_error(a: f64, n: f64, tol: f64, floor: f64) -> f64 {
    let diff = (a - n).abs();
    if !diff.is_finite() {
        return f64::INFINITY;
    }
    diff / a.abs().max(n.abs()).max(floor / tol)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One sampled problem: input values and the graph over them.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

type Sampler = fn(&mut crate::rng::Rng) -> Result<Instance>;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_error: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} instances {:>3}  coords {:>6}  max err {:.3e}",
            if self.passed { "ok  " } else { "FAIL" },
            self.name,
            self.instances,
            self.coordinates,
            self.max_error
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Standard normal entries pushed away from zero by at least `gap`.
fn randn_away<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], gap: f64) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

fn dim<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(1..=4)
}

fn shape_any<R: Rng + ?Sized>(rng: &mut R) -> Vec<usize> {
    if rng.random_bool(0.3) {
        vec![dim(rng)]
    } else {
        vec![dim(rng), dim(rng)]
    }
}

fn inst(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Result<Instance> {
    Ok(Instance {
        inputs,
        build: Box::new(build),
    })
}

fn s_matmul(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, k, n) = (dim(r), dim(r), dim(r));
    inst(vec![randn(r, &[m, k]), randn(r, &[k, n])], |t, v| t.matmul(v[0], v[1]))
}

fn s_matmul_t(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, k, n) = (dim(r), dim(r), dim(r));
    inst(vec![randn(r, &[m, k]), randn(r, &[n, k])], |t, v| t.matmul_t(v[0], v[1]))
}

fn s_transpose(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, n) = (dim(r), dim(r));
    inst(vec![randn(r, &[m, n])], |t, v| t.transpose(v[0]))
}

fn s_add(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    inst(vec![randn(r, &s), randn(r, &s)], |t, v| t.add(v[0], v[1]))
}

fn s_add_row(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, n) = (dim(r), dim(r));
    inst(vec![randn(r, &[m, n]), randn(r, &[n])], |t, v| t.add_row(v[0], v[1]))
}

fn s_hadamard(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    inst(vec![randn(r, &s), randn(r, &s)], |t, v| t.hadamard(v[0], v[1]))
}

fn s_mul_row(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, n) = (dim(r), dim(r));
    inst(vec![randn(r, &[m, n]), randn(r, &[n])], |t, v| t.mul_row(v[0], v[1]))
}

fn s_scale(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    let c: f64 = StandardNormal.sample(r);
    inst(vec![randn(r, &s)], move |t, v| t.scale(v[0], c))
}

fn s_mul_scalar(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    inst(vec![randn(r, &s), randn(r, &[])], |t, v| t.mul_scalar(v[0], v[1]))
}

fn s_relu(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    inst(vec![randn_away(r, &s, 0.05)], |t, v| t.relu(v[0]))
}

fn s_l2_normalize(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    inst(vec![randn_away(r, &s, 0.1)], |t, v| t.l2_normalize(v[0], NORM_EPS))
}

fn s_softmax(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    inst(vec![randn(r, &s)], |t, v| t.softmax(v[0]))
}

fn s_cross_entropy(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, n) = (dim(r), dim(r));
    let data = (0..m * n).map(|_| r.random_range(0.1..1.0)).collect();
    let p = Tensor::matrix(m, n, data)?;
    let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
    inst(vec![p], move |t, v| t.cross_entropy(v[0], &labels, LOG_EPS))
}

fn s_mean_rows(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, n) = (dim(r), dim(r));
    inst(vec![randn(r, &[m, n])], |t, v| t.mean_rows(v[0]))
}

fn s_sum(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    inst(vec![randn(r, &s)], |t, v| t.sum(v[0]))
}

fn s_select_rows(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, n) = (dim(r), dim(r));
    let k = dim(r) + 1;
    let idx: Vec<usize> = (0..k).map(|_| r.random_range(0..m)).collect();
    inst(vec![randn(r, &[m, n])], move |t, v| t.select_rows(v[0], &idx))
}

fn s_concat_rows(r: &mut crate::rng::Rng) -> Result<Instance> {
    let n = dim(r);
    let parts = r.random_range(2..=3);
    let inputs: Vec<Tensor> = (0..parts)
        .map(|_| {
            if r.random_bool(0.4) {
                randn(r, &[n])
            } else {
                let m = dim(r);
                randn(r, &[m, n])
            }
        })
        .collect();
    inst(inputs, |t, v| t.concat_rows(v))
}

fn s_reshape(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (m, n) = (dim(r), dim(r));
    inst(vec![randn(r, &[m, n])], move |t, v| t.reshape(v[0], &[n, m]))
}

fn s_dropout(r: &mut crate::rng::Rng) -> Result<Instance> {
    let s = shape_any(r);
    let p = r.random_range(0.1..0.6);
    let seed: u64 = r.random();
    inst(vec![randn(r, &s)], move |t, v| {
        let mut mask_rng = stream(seed, Stream::GradCheck);
        t.dropout(v[0], p, &mut mask_rng, true)
    })
}

fn small_extractor<R: Rng + ?Sized>(r: &mut R, final_relu: bool) -> Result<Extractor> {
    let config = ExtractorConfig {
        input_dim: dim(r) + 1,
        hidden_dims: vec![dim(r) + 1],
        feature_dim: dim(r) + 1,
        use_final_relu: final_relu,
        dropout_p: 0.0,
    };
    Extractor::init(config, r)
}

/// Inputs: x, then (weight, bias) per layer.
fn extractor_inputs<R: Rng + ?Sized>(r: &mut R, e: &Extractor, batch: usize) -> Vec<Tensor> {
    let mut inputs = vec![randn(r, &[batch, e.config.input_dim])];
    for l in &e.layers {
        inputs.push(l.weight.value.clone());
        inputs.push(randn(r, l.bias.value.shape()));
    }
    inputs
}

fn bind_layers(v: &[Var]) -> ExtractorVars {
    ExtractorVars {
        layers: v.chunks(2).map(|c| (c[0], c[1])).collect(),
    }
}

fn s_extractor(r: &mut crate::rng::Rng) -> Result<Instance> {
    let final_relu = r.random_bool(0.5);
    let e = small_extractor(r, final_relu)?;
    let batch = dim(r);
    let inputs = extractor_inputs(r, &e, batch);
    inst(inputs, move |t, v| {
        let mut unused = stream(0, Stream::GradCheck);
        e.forward(t, &bind_layers(&v[1..]), v[0], false, &mut unused)
    })
}

fn s_cosine_scores(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (b, k, d) = (dim(r), dim(r), dim(r) + 1);
    let tau = Tensor::scalar(r.random_range(1.0..10.0));
    inst(
        vec![randn_away(r, &[b, d], 0.1), randn_away(r, &[k, d], 0.1), tau],
        |t, v| cosine_scores(t, v[0], v[1], v[2]),
    )
}

fn s_dot_scores(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (b, k, d) = (dim(r), dim(r), dim(r));
    inst(vec![randn(r, &[b, d]), randn(r, &[k, d])], |t, v| dot_scores(t, v[0], v[1]))
}

/// Inputs: support, base weights, φ_avg, φ_att, φ_q, keys, γ.
fn s_generator(r: &mut crate::rng::Rng) -> Result<Instance> {
    let (n, k_base, d) = (dim(r), dim(r) + 1, dim(r) + 1);
    let excluded: Vec<usize> = (0..k_base).filter(|_| r.random_bool(0.3)).take(k_base - 1).collect();
    let inputs = vec![
        randn_away(r, &[n, d], 0.1),
        randn_away(r, &[k_base, d], 0.1),
        randn(r, &[d]),
        randn(r, &[d]),
        randn(r, &[d, d]),
        randn_away(r, &[k_base, d], 0.1),
        Tensor::scalar(r.random_range(1.0..10.0)),
    ];
    inst(inputs, move |t, v| {
        let vars = GeneratorVars {
            phi_avg: v[2],
            phi_att: v[3],
            phi_q: v[4],
            keys: v[5],
            gamma: v[6],
        };
        let memory = build_memory(t, v[1], v[5], &excluded)?;
        generate(t, &vars, GeneratorMode::AvgPlusAttention, v[0], Some(&memory))
    })
}

/// The full stage-2 objective on a tiny synthetic problem. Inputs: W_base,
/// τ, φ_avg, φ_att, φ_q, keys, γ.
fn s_episode_loss(r: &mut crate::rng::Rng) -> Result<Instance> {
    let data_cfg = SynthConfig {
        n_base: 6,
        n_val: 1,
        n_test: 1,
        examples_per_category: 6,
        input_dim: 4,
        superclasses: 2,
        seed: r.random(),
        ..Default::default()
    };
    let dataset = generate_dataset(&data_cfg)?;
    let ext = ExtractorConfig {
        input_dim: 4,
        hidden_dims: vec![5],
        feature_dim: 3,
        use_final_relu: false,
        dropout_p: 0.0,
    };
    let head = if r.random_bool(0.5) { HeadKind::Cosine } else { HeadKind::Dot };
    let model = FewShotModel::init(ext, head, 6, GeneratorMode::AvgPlusAttention, r.random())?;
    let views = base_views(&dataset, 0)?;
    let train = TrainConfig {
        k_novel: 2,
        shots: vec![1, 2],
        t_novel_per_category: 2,
        t_base: 4,
        ..Default::default()
    };
    let episode = sample_episode(&views, &train, r)?;
    let bank = FeatureBank::compute(&model.extractor, &dataset, &dataset.split.base)?;
    let d = 3;
    let inputs = vec![
        model.classifier.base_weights.value.clone(),
        Tensor::scalar(r.random_range(1.0..10.0)),
        randn(r, &[d]),
        randn(r, &[d]),
        randn(r, &[d, d]),
        randn_away(r, &[6, d], 0.1),
        Tensor::scalar(r.random_range(1.0..10.0)),
    ];
    inst(inputs, move |t, v| {
        let vars = EpisodeVars {
            classifier: ClassifierVars { base: v[0], tau: v[1] },
            generator: GeneratorVars {
                phi_avg: v[2],
                phi_att: v[3],
                phi_q: v[4],
                keys: v[5],
                gamma: v[6],
            },
        };
        Ok(episode_loss(t, &model, &vars, &dataset, &bank, &episode, None)?.loss)
    })
}

/// Base classification loss through the extractor. Inputs: x, θ, W_base, τ.
fn s_stage1_loss(r: &mut crate::rng::Rng) -> Result<Instance> {
    let e = small_extractor(r, false)?;
    let batch = dim(r) + 1;
    let k = dim(r) + 1;
    let mut inputs = extractor_inputs(r, &e, batch);
    inputs.push(randn_away(r, &[k, e.config.feature_dim], 0.1));
    inputs.push(Tensor::scalar(r.random_range(1.0..10.0)));
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..k)).collect();
    let head = if r.random_bool(0.5) { HeadKind::Cosine } else { HeadKind::Dot };
    let n_theta = 2 * e.layers.len();
    inst(inputs, move |t, v| {
        let mut unused = stream(0, Stream::GradCheck);
        let z = e.forward(t, &bind_layers(&v[1..=n_theta]), v[0], false, &mut unused)?;
        let s = crate::classifier::scores(t, head, z, v[n_theta + 1], v[n_theta + 2])?;
        let p = t.softmax(s)?;
        t.cross_entropy(p, &labels, LOG_EPS)
    })
}

/// Every check in the suite, by name.
pub fn checks() -> Vec<(&'static str, Sampler)> {
    vec![
        ("matmul", s_matmul as Sampler),
        ("matmul_t", s_matmul_t),
        ("transpose", s_transpose),
        ("add", s_add),
        ("add_row", s_add_row),
        ("hadamard", s_hadamard),
        ("mul_row", s_mul_row),
        ("scale", s_scale),
        ("mul_scalar", s_mul_scalar),
        ("relu", s_relu),
        ("l2_normalize", s_l2_normalize),
        ("softmax", s_softmax),
        ("cross_entropy", s_cross_entropy),
        ("mean_rows", s_mean_rows),
        ("sum", s_sum),
        ("select_rows", s_select_rows),
        ("concat_rows", s_concat_rows),
        ("reshape", s_reshape),
        ("dropout", s_dropout),
        ("extractor", s_extractor),
        ("cosine_scores", s_cosine_scores),
        ("dot_scores", s_dot_scores),
        ("generator", s_generator),
        ("stage1_loss", s_stage1_loss),
        ("episode_loss", s_episode_loss),
    ]
}

/// Builds `instance` on a fresh tape and reduces it to a scalar with the
/// weights `w` (drawn on first use).
fn evaluate(
    instance: &Instance,
    inputs: &[Tensor],
    w: &mut Option<Tensor>,
    rng: &mut crate::rng::Rng,
    corrupt: Option<OpKind>,
    with_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    tape.corrupt_adjoint(corrupt);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = (instance.build)(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let shape = tape.shape(out).to_vec();
        let weights = w.get_or_insert_with(|| randn(rng, &shape)).clone();
        let wv = tape.constant(weights);
        let prod = tape.hadamard(out, wv)?;
        tape.sum(prod)?
    };
    let value = tape.value(loss).item();
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Maximum scaled error over every input coordinate of one instance.
pub fn check_instance(
    instance: &Instance,
    config: &GradCheckConfig,
    rng: &mut crate::rng::Rng,
) -> Result<(f64, usize)> {
    let mut w = None;
    let (_, grads) = evaluate(instance, &instance.inputs, &mut w, rng, config.corrupt, true)?;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (i, x) in instance.inputs.iter().enumerate() {
        let mut f = |vals: &[f64]| -> Result<f64> {
            let mut inputs = instance.inputs.clone();
            inputs[i] = Tensor::new(x.shape().to_vec(), vals.to_vec())?;
            Ok(evaluate(instance, &inputs, &mut w.clone(), rng, None, false)?.0)
        };
        let numeric = finite_diff(&mut f, x.data(), config.step)?;
        for (a, n) in grads[i].iter().zip(&numeric) {
            worst = worst.max(scaled_error(*a, *n, config.rel_tol, config.abs_floor));
            coords += 1;
        }
    }
    Ok((worst, coords))
}

pub fn run_check(name: &str, sampler: Sampler, config: &GradCheckConfig, index: u64) -> Result<CheckResult> {
    let mut rng = crate::rng::indexed(config.seed, Stream::GradCheck, index);
    let mut max_error: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..config.instances {
        let instance = sampler(&mut rng)?;
        let (e, c) = check_instance(&instance, config, &mut rng)?;
        max_error = max_error.max(e);
        coordinates += c;
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances: config.instances,
        coordinates,
        max_error,
        passed: max_error <= config.rel_tol,
    })
}

/// The whole suite, or the checks named in `only`.
pub fn run_suite(config: &GradCheckConfig, only: &[String]) -> Result<GradCheckReport> {
    let start = Instant::now();
    let all = checks();
    if let Some(bad) = only.iter().find(|n| !all.iter().any(|(c, _)| c == n)) {
        return Err(Error::Config(format!("unknown gradient check `{bad}`")));
    }
    let mut results = Vec::new();
    for (i, (name, sampler)) in all.into_iter().enumerate() {
        if only.is_empty() || only.iter().any(|n| n == name) {
            results.push(run_check(name, sampler, config, i as u64)?);
        }
    }
    Ok(GradCheckReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}
