//! The full recognition model and its checkpoint file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::classifier::{ClassifierState, HeadKind};
use crate::config::{parse_bool, parse_kv, parse_list, parse_value, render_kv, render_list};
use crate::container::{Reader, Writer};
use crate::dataset::{Dataset, ExampleRef};
use crate::error::{Error, Result};
use crate::extractor::{Extractor, ExtractorConfig};
use crate::generator::{GeneratorMode, GeneratorParams};
use crate::rng::{stream, Stream};
use crate::tensor::{Param, Tensor};

/// Extractor θ, classifier `W_base` and τ, generator φ.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotModel {
    pub extractor: Extractor,
    pub classifier: ClassifierState,
    pub generator: GeneratorParams,
}

impl FewShotModel {
    /// Fresh model; θ and `W_base` come from separate seed streams.
    pub fn init(
        extractor: ExtractorConfig,
        head: HeadKind,
        k_base: usize,
        mode: GeneratorMode,
        seed: u64,
    ) -> Result<Self> {
        let d = extractor.feature_dim;
        let extractor = Extractor::init(extractor, &mut stream(seed, Stream::Extractor))?;
        let classifier = ClassifierState::init(head, k_base, d, &mut stream(seed, Stream::Classifier));
        let generator = GeneratorParams::init(&classifier.base_weights.value, mode);
        Ok(Self {
            extractor,
            classifier,
            generator,
        })
    }

    pub fn head(&self) -> HeadKind {
        self.classifier.head
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut v = self.extractor.params();
        v.extend(self.classifier.params());
        v.extend(self.generator.params());
        v
    }

    /// FNV-1a over the bit patterns of θ.
    pub fn extractor_checksum(&self) -> u64 {
        checksum(self.extractor.params())
    }

    fn model_entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.extractor.config;
        vec![
            ("input_dim", c.input_dim.to_string()),
            ("hidden_dims", render_list(&c.hidden_dims)),
            ("feature_dim", c.feature_dim.to_string()),
            ("final_relu", c.use_final_relu.to_string()),
            ("dropout_p", c.dropout_p.to_string()),
            ("head", self.classifier.head.to_string()),
            ("generator", self.generator.mode.to_string()),
            ("k_base", self.classifier.k_base().to_string()),
        ]
    }
}

pub fn checksum<'a>(params: impl IntoIterator<Item = &'a Param>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for v in p.value.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Inference-mode features of whole categories, computed once.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    features: BTreeMap<usize, Tensor>,
}

impl FeatureBank {
    pub fn compute(extractor: &Extractor, dataset: &Dataset, categories: &[usize]) -> Result<Self> {
        let mut features = BTreeMap::new();
        for &c in categories {
            if !features.contains_key(&c) {
                features.insert(c, extractor.extract_batch(dataset.examples(c))?);
            }
        }
        Ok(Self { features })
    }

    pub fn category(&self, c: usize) -> &Tensor {
        &self.features[&c]
    }

    pub fn feature(&self, r: ExampleRef) -> &[f64] {
        self.features[&r.category].row(r.index)
    }

    pub fn gather(&self, refs: &[ExampleRef]) -> Result<Tensor> {
        let Some(first) = refs.first() else {
            return Err(Error::InvalidTensor("gather of no examples".into()));
        };
        let d = self.category(first.category).cols();
        let mut data = Vec::with_capacity(refs.len() * d);
        for &r in refs {
            data.extend_from_slice(self.feature(r));
        }
        Tensor::matrix(refs.len(), d, data)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"FSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus the run settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u32,
    /// Echo of the run configuration, `key = value` text.
    pub run_config: String,
    pub model: FewShotModel,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CKPT_MAGIC, CHECKPOINT_VERSION);
        w.u32(self.stage);
        w.str(&self.run_config);
        w.str(&render_kv(&self.model.model_entries()));
        let params = self.model.all_params();
        w.u64(params.len() as u64);
        for p in params {
            w.str(&p.name);
            w.tensor(&p.value);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CKPT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let stage = r.u32("stage")?;
        let run_config = r.str("run config")?;
        let mut ext = ExtractorConfig::default();
        let mut head = HeadKind::Cosine;
        let mut mode = GeneratorMode::AvgOnly;
        let mut k_base = 0usize;
        for (k, v) in parse_kv(&r.str("model section")?)? {
            match k.as_str() {
                "input_dim" => ext.input_dim = parse_value(&k, &v)?,
                "hidden_dims" => ext.hidden_dims = parse_list(&k, &v)?,
                "feature_dim" => ext.feature_dim = parse_value(&k, &v)?,
                "final_relu" => ext.use_final_relu = parse_bool(&k, &v)?,
                "dropout_p" => ext.dropout_p = parse_value(&k, &v)?,
                "head" => head = v.parse()?,
                "generator" => mode = v.parse()?,
                "k_base" => k_base = parse_value(&k, &v)?,
                _ => return Err(Error::UnknownKey(k)),
            }
        }
        if k_base == 0 {
            return Err(Error::Format("checkpoint: missing k_base".into()));
        }
        let mut model = FewShotModel::init(ext, head, k_base, mode, 0)?;
        let n = r.u64("parameter count")? as usize;
        let mut stored = BTreeMap::new();
        for _ in 0..n {
            let name = r.str("parameter name")?;
            let value = r.tensor("parameter value")?;
            stored.insert(name, value);
        }
        r.finish()?;
        let mut slots: Vec<&mut Param> = model.extractor.params_mut();
        slots.push(&mut model.classifier.base_weights);
        slots.push(&mut model.classifier.tau);
        let g = &mut model.generator;
        slots.extend([&mut g.phi_avg, &mut g.phi_att, &mut g.phi_q, &mut g.keys, &mut g.gamma]);
        if slots.len() != stored.len() {
            return Err(Error::Format(format!(
                "checkpoint: {} parameters stored, model has {}",
                stored.len(),
                slots.len()
            )));
        }
        for slot in slots {
            let value = stored
                .remove(&slot.name)
                .ok_or_else(|| Error::Format(format!("checkpoint: missing `{}`", slot.name)))?;
            if value.shape() != slot.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint: `{}` has shape {:?}, expected {:?}",
                    slot.name,
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(Self {
            stage,
            run_config,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> FewShotModel {
        let cfg = ExtractorConfig {
            input_dim: 4,
            hidden_dims: vec![3],
            feature_dim: 2,
            ..Default::default()
        };
        FewShotModel::init(cfg, HeadKind::Cosine, 5, GeneratorMode::AvgPlusAttention, 9).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            stage: 2,
            run_config: "seed = 9\n".into(),
            model: model(),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let bytes = Checkpoint {
            stage: 1,
            run_config: String::new(),
            model: model(),
        }
        .to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn checksum_tracks_theta_only() {
        let mut m = model();
        let before = m.extractor_checksum();
        m.classifier.tau.value = Tensor::scalar(3.0);
        assert_eq!(before, m.extractor_checksum());
        m.extractor.layers[0].bias.value.data_mut()[0] = 1e-300;
        assert_ne!(before, m.extractor_checksum());
    }
}
