//! Plain-text `key = value` configuration.
//!
//! One setting per line, `#` starts a comment. Every key must be known to
//! some section; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::extractor::ExtractorConfig;
use crate::trainer::TrainConfig;

/// A configuration section addressable by flat keys.
pub trait KvSection {
    /// Applies `key = value`; `Ok(false)` if the key is not in this section.
    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool>;
    fn entries(&self) -> Vec<(&'static str, String)>;
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, got `{line}`",
                n + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render_kv(entries: &[(&str, String)]) -> String {
    entries
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

pub(crate) fn render_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every setting a run needs, with defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig::default(),
            extractor: ExtractorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.seed = parse_value(key, value)?;
            self.data.seed = self.seed;
            return Ok(());
        }
        if key == "input_dim" {
            self.data.input_dim = parse_value(key, value)?;
            self.extractor.input_dim = self.data.input_dim;
            return Ok(());
        }
        let handled = self.data.set_kv(key, value)?
            || self.extractor.set_kv(key, value)?
            || self.train.set_kv(key, value)?
            || self.eval.set_kv(key, value)?;
        if handled {
            Ok(())
        } else {
            Err(Error::UnknownKey(key.to_string()))
        }
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&parse_kv(text)?)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// All settings in canonical order, no duplicates.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![("seed", self.seed.to_string())];
        let mut seen: std::collections::BTreeSet<&str> = ["seed"].into();
        let sections = [
            self.data.entries(),
            self.extractor.entries(),
            self.train.entries(),
            self.eval.entries(),
        ];
        for (k, v) in sections.into_iter().flatten() {
            if seen.insert(k) {
                out.push((k, v));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        render_kv(&self.entries())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.extractor.validate()?;
        self.train.validate(self.data.n_base)?;
        self.eval.validate()
    }
}

impl KvSection for ExtractorConfig {
    fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "hidden_dims" => self.hidden_dims = parse_list(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "final_relu" => self.use_final_relu = parse_bool(key, value)?,
            "dropout_p" => self.dropout_p = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("hidden_dims", render_list(&self.hidden_dims)),
            ("feature_dim", self.feature_dim.to_string()),
            ("final_relu", self.use_final_relu.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = parse_kv("# header\n\nseed = 4  # trailing\nhead=dot\n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("seed".to_string(), "4".to_string()),
                ("head".to_string(), "dot".to_string())
            ]
        );
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_text("learning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "learning_rate"));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("seed", "17").unwrap();
        c.set("head", "dot").unwrap();
        c.set("hidden_dims", "16,8").unwrap();
        c.set("shots", "1,2,5").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.data.seed, 17);
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("final_relu", "maybe").is_err());
        assert!(c.set("s1_lr", "fast").is_err());
        assert!(c.set("head", "euclid").is_err());
    }

    #[test]
    fn entries_have_unique_keys() {
        let e = RunConfig::default().entries();
        let set: std::collections::BTreeSet<_> = e.iter().map(|(k, _)| *k).collect();
        assert_eq!(set.len(), e.len());
    }
}
