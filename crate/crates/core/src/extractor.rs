//! Fully-connected feature extractor `z = F(x | θ)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Apply ReLU after the last layer. Off for the cosine models.
    pub use_final_relu: bool,
    /// Dropout probability on the output features while training.
    pub dropout_p: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            use_final_relu: false,
            dropout_p: 0.1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must be nonempty".into()));
        }
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("all extractor dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} must lie in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// `[input_dim, hidden.., feature_dim]`
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.feature_dim);
        d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Param,
    pub bias: Param,
}

/// The extractor parameters θ together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub layers: Vec<Layer>,
}

/// Tape handles for θ.
#[derive(Clone, Debug)]
pub struct ExtractorVars {
    pub layers: Vec<(Var, Var)>,
}

/// Weight matrix with entries `N(0, 1/fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(rows: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let data = (0..rows * fan_in).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, fan_in, data).expect("nonzero dims")
}

impl Extractor {
    pub fn init<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                weight: Param::new(format!("extractor.{i}.weight"), init_weight(w[1], w[0], rng)),
                bias: Param::new(format!("extractor.{i}.bias"), Tensor::zeros(&[w[1]])),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Registers θ on the tape; `trainable == false` binds constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ExtractorVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(&l.weight), tape.param(&l.bias))
                } else {
                    (
                        tape.constant(l.weight.value.clone()),
                        tape.constant(l.bias.value.clone()),
                    )
                }
            })
            .collect();
        ExtractorVars { layers }
    }

    /// Features for a vector `[input_dim]` or a batch `[B × input_dim]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ExtractorVars,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let in_shape = tape.shape(x).to_vec();
        if *in_shape.last().unwrap_or(&0) != self.config.input_dim {
            return Err(Error::Shape {
                op: "extract",
                lhs: in_shape,
                rhs: vec![self.config.input_dim],
            });
        }
        let single = in_shape.len() == 1;
        let mut h = if single {
            tape.reshape(x, &[1, self.config.input_dim])?
        } else {
            x
        };
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            h = tape.matmul_t(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last || self.config.use_final_relu {
                h = tape.relu(h)?;
            }
        }
        h = tape.dropout(h, self.config.dropout_p, rng, train)?;
        if single {
            h = tape.reshape(h, &[self.config.feature_dim])?;
        }
        Ok(h)
    }

    /// Inference-mode features of a `[B × input_dim]` batch.
    pub fn extract_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut unused = crate::rng::stream(0, crate::rng::Stream::Extractor);
        let z = self.forward(&mut tape, &vars, xv, false, &mut unused)?;
        Ok(tape.value(z).clone())
    }

    pub fn pull_grads(&mut self, tape: &Tape, vars: &ExtractorVars) {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&vars.layers) {
            tape.pull_grad(w, &mut layer.weight);
            tape.pull_grad(b, &mut layer.bias);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn small_config(use_final_relu: bool) -> ExtractorConfig {
        ExtractorConfig {
            input_dim: 2,
            hidden_dims: vec![2],
            feature_dim: 2,
            use_final_relu,
            dropout_p: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = ExtractorConfig::default();
        let a = Extractor::init(cfg.clone(), &mut stream(3, Stream::Extractor)).unwrap();
        let b = Extractor::init(cfg, &mut stream(3, Stream::Extractor)).unwrap();
        assert_eq!(a, b);
        for l in &a.layers {
            assert!(l.bias.value.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.layers[0].weight.value.shape(), &[64, 32]);
        assert_eq!(a.layers[2].weight.value.shape(), &[32, 64]);
    }

    #[test]
    fn init_std_matches_fan_in() {
        let w = init_weight(200, 100, &mut stream(11, Stream::Extractor));
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.02, "std {std}");
    }

    #[test]
    fn zero_params_give_zero_features() {
        let mut e = Extractor::init(small_config(false), &mut stream(0, Stream::Extractor)).unwrap();
        for p in e.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = e.extract_batch(&Tensor::from_rows(&[vec![1.0, -3.0]]).unwrap()).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_traced_forward() {
        // h = relu(W1 x + b1), z = W2 h + b2, no final relu.
        let mut e = Extractor::init(small_config(false), &mut stream(0, Stream::Extractor)).unwrap();
        e.layers[0].weight.value = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5]]).unwrap();
        e.layers[0].bias.value = Tensor::vector(vec![0.0, 1.0]);
        e.layers[1].weight.value = Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, 2.0]]).unwrap();
        e.layers[1].bias.value = Tensor::vector(vec![0.5, -4.0]);
        // W1 x + b1 = [-1, 2] -> relu [0, 2]; W2 h + b2 = [2.5, 0.0]
        let z = e.extract_batch(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(z.data(), &[2.5, 0.0]);

        e.layers[1].bias.value = Tensor::vector(vec![0.5, -5.0]);
        let z = e.extract_batch(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(z.data(), &[2.5, -1.0]);
        e.config.use_final_relu = true;
        let z = e.extract_batch(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(z.data(), &[2.5, 0.0]);
    }

    #[test]
    fn vector_input_gives_vector_feature() {
        let e = Extractor::init(ExtractorConfig::default(), &mut stream(0, Stream::Extractor)).unwrap();
        let mut tape = Tape::new();
        let vars = e.bind(&mut tape, false);
        let x = tape.constant(Tensor::vector(vec![0.1; 32]));
        let z = e
            .forward(&mut tape, &vars, x, false, &mut stream(0, Stream::Stage1))
            .unwrap();
        assert_eq!(tape.shape(z), &[32]);

        let bad = tape.constant(Tensor::vector(vec![0.1; 31]));
        assert!(e
            .forward(&mut tape, &vars, bad, false, &mut stream(0, Stream::Stage1))
            .is_err());
    }

    #[test]
    fn rejects_invalid_config() {
        let mut c = ExtractorConfig::default();
        c.hidden_dims.clear();
        assert!(c.validate().is_err());
        let c = ExtractorConfig {
            dropout_p: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
