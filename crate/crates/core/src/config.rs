//! Flat `section.key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments to
//! the same key win, which lets command-line overrides be appended.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1 });
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Overwrites `target` when `key` is present.
    pub fn read<T: FromStr>(&self, key: &str, target: &mut T) -> Result<(), ConfigError>
    where
        T::Err: Display,
    {
        if let Some(v) = self.raw(key) {
            *target = v.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: v.into(), reason: e.to_string() })?;
        }
        Ok(())
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let kv = KeyValues::parse("# run\ntrain.lr = 0.01\n\ntrain.epochs=3\ntrain.lr = 0.5\n").unwrap();
        let mut lr = 0.0f64;
        kv.read("train.lr", &mut lr).unwrap();
        assert_eq!(lr, 0.5);
        let mut missing = 7usize;
        kv.read("train.batch_size", &mut missing).unwrap();
        assert_eq!(missing, 7);
        assert_eq!(kv.to_text(), "train.epochs = 3\ntrain.lr = 0.5\n");
    }

    #[test]
    fn errors() {
        assert_eq!(KeyValues::parse("a.b\n"), Err(ConfigError::Syntax { line: 1 }));
        let kv = KeyValues::parse("x.y = nope\n").unwrap();
        let mut n = 0usize;
        assert!(matches!(kv.read("x.y", &mut n), Err(ConfigError::BadValue { .. })));
        assert_eq!(kv.check_known(&["x.z"]), Err(ConfigError::UnknownKey("x.y".into())));
    }
}

pub use run::{RunConfig, SynthSettings};

mod run {
    use super::{ConfigError, KeyValues};
    use crate::dataprep::SynthInteractionSpec;
    use crate::evalkit::EvalConfig;
    use crate::featstore::SyntheticVfmSpec;
    use crate::numkern::derive_seed;
    use crate::resample::{SamplePolicy, DEFAULT_CLIPS};
    use crate::trainloop::{ModelConfig, TrainConfig};

    /// Synthetic benchmark shape. Seeds are filled in from the run seed.
    #[derive(Clone, Debug, PartialEq)]
    pub struct SynthSettings {
        pub vfm: SyntheticVfmSpec,
        pub n_videos: usize,
        pub interactions: SynthInteractionSpec,
        /// Std of the noise added to frame-to-title scores.
        pub score_sigma: f64,
    }

    impl Default for SynthSettings {
        fn default() -> Self {
            Self { vfm: SyntheticVfmSpec::default(), n_videos: 2000, interactions: SynthInteractionSpec::default(), score_sigma: 0.05 }
        }
    }

    /// Every knob of a run. All fields have defaults; a config file and
    /// command-line overrides are applied on top.
    #[derive(Clone, Debug, PartialEq)]
    pub struct RunConfig {
        pub seed: u64,
        pub synth: SynthSettings,
        pub policy: String,
        pub n_select: usize,
        pub n_clips: usize,
        pub model: ModelConfig,
        pub train: TrainConfig,
        pub eval: EvalConfig,
    }

    impl Default for RunConfig {
        fn default() -> Self {
            let mut c = Self {
                seed: 42,
                synth: SynthSettings::default(),
                policy: "semantic".into(),
                n_select: 5,
                n_clips: DEFAULT_CLIPS,
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                eval: EvalConfig::default(),
            };
            c.sync_seeds();
            c
        }
    }

    const KEYS: &[&str] = &[
        "run.seed",
        "synth.n_topics",
        "synth.dim",
        "synth.signal_frames",
        "synth.noise_frames",
        "synth.noise_sigma",
        "synth.n_videos",
        "synth.n_users",
        "synth.sharpness",
        "synth.min_len",
        "synth.max_len",
        "synth.score_sigma",
        "resample.policy",
        "resample.n_select",
        "resample.n_clips",
        "train.batch_size",
        "train.epochs",
        "train.lr",
        "train.weight_decay",
        "train.precision",
        "train.validate",
        "eval.n_negatives",
        "eval.alpha",
        "eval.ks",
        "eval.full_ranking",
        "eval.n_buckets",
    ];

    impl RunConfig {
        pub fn from_text(text: &str) -> Result<Self, ConfigError> {
            let mut c = Self::default();
            c.apply(&KeyValues::parse(text)?)?;
            Ok(c)
        }

        pub fn apply(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
            let known: Vec<&str> = KEYS.iter().chain(ModelConfig::KEYS).copied().collect();
            kv.check_known(&known)?;
            kv.read("run.seed", &mut self.seed)?;
            let s = &mut self.synth;
            kv.read("synth.n_topics", &mut s.vfm.n_topics)?;
            kv.read("synth.dim", &mut s.vfm.dim)?;
            kv.read("synth.signal_frames", &mut s.vfm.signal_frames_per_video)?;
            kv.read("synth.noise_frames", &mut s.vfm.noise_frames_per_video)?;
            kv.read("synth.noise_sigma", &mut s.vfm.noise_sigma)?;
            kv.read("synth.n_videos", &mut s.n_videos)?;
            kv.read("synth.n_users", &mut s.interactions.n_users)?;
            kv.read("synth.sharpness", &mut s.interactions.sharpness)?;
            kv.read("synth.min_len", &mut s.interactions.min_len)?;
            kv.read("synth.max_len", &mut s.interactions.max_len)?;
            kv.read("synth.score_sigma", &mut s.score_sigma)?;
            kv.read("resample.policy", &mut self.policy)?;
            kv.read("resample.n_select", &mut self.n_select)?;
            kv.read("resample.n_clips", &mut self.n_clips)?;
            self.model.read_kv(kv)?;
            let t = &mut self.train;
            kv.read("train.batch_size", &mut t.batch_size)?;
            kv.read("train.epochs", &mut t.epochs)?;
            kv.read("train.lr", &mut t.lr)?;
            kv.read("train.weight_decay", &mut t.weight_decay)?;
            kv.read("train.precision", &mut t.precision)?;
            kv.read("train.validate", &mut t.validate)?;
            let e = &mut self.eval;
            kv.read("eval.n_negatives", &mut e.n_negatives)?;
            kv.read("eval.alpha", &mut e.alpha)?;
            kv.read("eval.full_ranking", &mut e.full_ranking)?;
            kv.read("eval.n_buckets", &mut e.n_buckets)?;
            if let Some(v) = kv.raw("eval.ks") {
                e.ks = v
                    .split(',')
                    .map(|k| k.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|err| ConfigError::BadValue { key: "eval.ks".into(), value: v.into(), reason: err.to_string() })?;
            }
            self.sync_seeds();
            self.validate()
        }

        /// Fans the run seed out to every consumer by role.
        pub fn sync_seeds(&mut self) {
            self.synth.vfm.seed = derive_seed(self.seed, "synth/vfm");
            self.synth.interactions.seed = derive_seed(self.seed, "synth/interactions");
            self.train.seed = derive_seed(self.seed, "train");
            self.eval.seed = derive_seed(self.seed, "eval");
        }

        pub fn similarity_seed(&self) -> u64 {
            derive_seed(self.seed, "synth/similarity")
        }

        pub fn init_seed(&self) -> u64 {
            derive_seed(self.seed, "init")
        }

        pub fn resample_seed(&self) -> u64 {
            derive_seed(self.seed, "resample")
        }

        pub fn sample_policy(&self) -> Result<SamplePolicy, ConfigError> {
            SamplePolicy::parse(&self.policy, self.n_select, self.n_clips, self.resample_seed())
                .map_err(|e| ConfigError::BadValue { key: "resample.policy".into(), value: self.policy.clone(), reason: e.to_string() })
        }

        pub fn validate(&self) -> Result<(), ConfigError> {
            let inv = |e: String| ConfigError::Invalid(e);
            self.synth.vfm.validate().map_err(inv)?;
            self.model.cva.validate().map_err(|e| inv(e.to_string()))?;
            let mut seq = self.model.seq.clone();
            seq.dim = self.model.cva.dim_in;
            seq.validate().map_err(|e| inv(e.to_string()))?;
            self.train.validate().map_err(|e| inv(e.to_string()))?;
            self.eval.validate().map_err(|e| inv(e.to_string()))?;
            self.sample_policy()?;
            Ok(())
        }

        /// Every setting as sorted `key = value` lines.
        pub fn to_kv(&self) -> KeyValues {
            let mut kv = KeyValues::default();
            kv.set("run.seed", self.seed);
            let s = &self.synth;
            kv.set("synth.n_topics", s.vfm.n_topics);
            kv.set("synth.dim", s.vfm.dim);
            kv.set("synth.signal_frames", s.vfm.signal_frames_per_video);
            kv.set("synth.noise_frames", s.vfm.noise_frames_per_video);
            kv.set("synth.noise_sigma", s.vfm.noise_sigma);
            kv.set("synth.n_videos", s.n_videos);
            kv.set("synth.n_users", s.interactions.n_users);
            kv.set("synth.sharpness", s.interactions.sharpness);
            kv.set("synth.min_len", s.interactions.min_len);
            kv.set("synth.max_len", s.interactions.max_len);
            kv.set("synth.score_sigma", s.score_sigma);
            kv.set("resample.policy", &self.policy);
            kv.set("resample.n_select", self.n_select);
            kv.set("resample.n_clips", self.n_clips);
            self.model.write_kv(&mut kv);
            let t = &self.train;
            kv.set("train.batch_size", t.batch_size);
            kv.set("train.epochs", t.epochs);
            kv.set("train.lr", t.lr);
            kv.set("train.weight_decay", t.weight_decay);
            kv.set("train.precision", t.precision);
            kv.set("train.validate", t.validate);
            let e = &self.eval;
            kv.set("eval.n_negatives", e.n_negatives);
            kv.set("eval.alpha", e.alpha);
            kv.set("eval.ks", e.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
            kv.set("eval.full_ranking", e.full_ranking);
            kv.set("eval.n_buckets", e.n_buckets);
            kv
        }

        pub fn to_text(&self) -> String {
            self.to_kv().to_text()
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn text_roundtrip() {
            let mut c = RunConfig::from_text("run.seed = 7\ncva.depth = 3\neval.ks = 5,10\ntrain.precision = f64\n").unwrap();
            assert_eq!(c.model.cva.depth, 3);
            assert_eq!(c.eval.ks, vec![5, 10]);
            assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
            let seed_before = c.train.seed;
            c.seed = 8;
            c.sync_seeds();
            assert_ne!(c.train.seed, seed_before);
        }

        #[test]
        fn unknown_and_invalid() {
            assert_eq!(RunConfig::from_text("train.lrr = 1\n"), Err(ConfigError::UnknownKey("train.lrr".into())));
            assert!(matches!(RunConfig::from_text("cva.heads = 3\n"), Err(ConfigError::Invalid(_))));
            assert!(matches!(RunConfig::from_text("resample.policy = best\n"), Err(ConfigError::BadValue { .. })));
        }
    }
}
