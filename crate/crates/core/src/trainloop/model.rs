use std::path::Path;

use crate::aggregator::{Aggregator, AggregatorKind, CvaConfig, FrameBatch};
use crate::config::{ConfigError, KeyValues};
use crate::featstore::FrameFeatureMatrix;
use crate::numkern::{Graph, ParamStore, Prng, Real, Tensor};
use crate::seqrec::{SeqEncoderConfig, UserEncoder};

use super::TrainError;

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub aggregator: AggregatorKind,
    pub cva: CvaConfig,
    /// `seq.dim` always equals `cva.dim_in`.
    pub seq: SeqEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let cva = CvaConfig { dim_in: 64, dim_latent: 64, n_latents: 1, depth: 2, heads: 4, ffn_mult: 4.0 };
        let seq = SeqEncoderConfig { dim: cva.dim_in, ..SeqEncoderConfig::default() };
        Self { aggregator: AggregatorKind::Cva, cva, seq }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model.aggregator",
        "cva.dim_in",
        "cva.dim_latent",
        "cva.n_latents",
        "cva.depth",
        "cva.heads",
        "cva.ffn_mult",
        "seq.max_seq_len",
        "seq.depth",
        "seq.heads",
        "seq.ffn_mult",
    ];

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("model.aggregator", self.aggregator);
        kv.set("cva.dim_in", self.cva.dim_in);
        kv.set("cva.dim_latent", self.cva.dim_latent);
        kv.set("cva.n_latents", self.cva.n_latents);
        kv.set("cva.depth", self.cva.depth);
        kv.set("cva.heads", self.cva.heads);
        kv.set("cva.ffn_mult", self.cva.ffn_mult);
        kv.set("seq.max_seq_len", self.seq.max_seq_len);
        kv.set("seq.depth", self.seq.depth);
        kv.set("seq.heads", self.seq.heads);
        kv.set("seq.ffn_mult", self.seq.ffn_mult);
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        if let Some(v) = kv.raw("model.aggregator") {
            self.aggregator = v.parse().map_err(|e: crate::aggregator::AggError| ConfigError::BadValue {
                key: "model.aggregator".into(),
                value: v.into(),
                reason: e.to_string(),
            })?;
        }
        kv.read("cva.dim_in", &mut self.cva.dim_in)?;
        kv.read("cva.dim_latent", &mut self.cva.dim_latent)?;
        kv.read("cva.n_latents", &mut self.cva.n_latents)?;
        kv.read("cva.depth", &mut self.cva.depth)?;
        kv.read("cva.heads", &mut self.cva.heads)?;
        kv.read("cva.ffn_mult", &mut self.cva.ffn_mult)?;
        kv.read("seq.max_seq_len", &mut self.seq.max_seq_len)?;
        kv.read("seq.depth", &mut self.seq.depth)?;
        kv.read("seq.heads", &mut self.seq.heads)?;
        kv.read("seq.ffn_mult", &mut self.seq.ffn_mult)?;
        self.seq.dim = self.cva.dim_in;
        Ok(())
    }
}

/// Aggregator plus user encoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub aggregator: Aggregator,
    pub user: UserEncoder,
}

const EMBED_CHUNK: usize = 256;
const ENCODE_CHUNK: usize = 128;

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let mut config = config.clone();
        config.seq.dim = config.cva.dim_in;
        let root = Prng::new(seed);
        let mut store = ParamStore::new();
        let aggregator = Aggregator::new(config.aggregator, &config.cva, &mut store, &mut root.fork("init/aggregator"))?;
        let user = UserEncoder::new(&mut store, "user", &config.seq, &mut root.fork("init/user"))?;
        Ok(Self { config, store, aggregator, user })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn aggregator_param_count(&self) -> usize {
        crate::aggregator::param_count(self.config.aggregator, &self.config.cva)
    }

    /// Embeddings of the listed items, one row each.
    pub fn embed_items(&self, features: &[FrameFeatureMatrix], items: &[usize]) -> Result<Tensor<T>, TrainError> {
        let d = self.config.cva.dim_in;
        let mut data = Vec::with_capacity(items.len() * d);
        for chunk in items.chunks(EMBED_CHUNK) {
            let mats: Vec<&FrameFeatureMatrix> =
                chunk.iter().map(|&i| features.get(i).ok_or(TrainError::MissingFeatures(i))).collect::<Result<_, _>>()?;
            let fb = FrameBatch::<T>::new(&mats, None)?;
            data.extend_from_slice(self.aggregator.embed(&self.store, &fb)?.data());
        }
        Ok(Tensor::matrix(items.len(), d, data)?)
    }

    /// Last-position user representation of every sequence, reading item
    /// embeddings from `item_emb` (one row per item id). Sequences longer
    /// than `max_seq_len` keep their most recent items.
    pub fn encode_last(&self, item_emb: &Tensor<T>, sequences: &[Vec<usize>]) -> Result<Tensor<T>, TrainError> {
        let d = self.config.cva.dim_in;
        let max = self.config.seq.max_seq_len;
        let mut data = Vec::with_capacity(sequences.len() * d);
        for chunk in sequences.chunks(ENCODE_CHUNK) {
            let cut: Vec<&[usize]> = chunk.iter().map(|s| &s[s.len().saturating_sub(max)..]).collect();
            if let Some(u) = cut.iter().position(|s| s.is_empty()) {
                return Err(TrainError::Config(format!("sequence {u} of chunk is empty")));
            }
            let len = cut.iter().map(|s| s.len()).max().unwrap_or(1);
            let mut idx = vec![None; cut.len() * len];
            for (u, s) in cut.iter().enumerate() {
                for (t, &i) in s.iter().enumerate() {
                    if i >= item_emb.rows() {
                        return Err(TrainError::MissingFeatures(i));
                    }
                    idx[u * len + len - s.len() + t] = Some(i);
                }
            }
            let valid = idx.iter().map(Option::is_some).collect();
            let mut g = Graph::with_params(&self.store);
            let table = g.constant(item_emb.clone());
            let x = g.gather_rows(table, idx)?;
            let p = self.user.forward(&mut g, x, cut.len(), len, valid)?;
            let last = g.select_rows(p, (0..cut.len()).map(|u| u * len + len - 1).collect())?;
            data.extend_from_slice(g.value(last).data());
        }
        Ok(Tensor::matrix(sequences.len(), d, data)?)
    }

    /// Every position's representation for one unpadded sequence of at most
    /// `max_seq_len` items: `len x D`.
    pub fn encode_rows(&self, item_emb: &Tensor<T>, sequence: &[usize]) -> Result<Tensor<T>, TrainError> {
        let len = sequence.len();
        if let Some(&i) = sequence.iter().find(|&&i| i >= item_emb.rows()) {
            return Err(TrainError::MissingFeatures(i));
        }
        let mut g = Graph::with_params(&self.store);
        let table = g.constant(item_emb.clone());
        let x = g.gather_rows(table, sequence.iter().map(|&i| Some(i)).collect())?;
        let p = self.user.forward(&mut g, x, 1, len, vec![true; len])?;
        Ok(g.value(p).clone())
    }

    /// Self-describing binary checkpoint.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut kv = KeyValues::default();
        self.config.write_kv(&mut kv);
        let cfg = kv.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BITS / 8).to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                if T::BITS == 32 {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        out
    }

    /// Rebuilds a model from checkpoint bytes. Payloads of either width are
    /// accepted and converted to `T`.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let width = r.u32()?;
        if width != 4 && width != 8 {
            return Err(TrainError::Checkpoint(format!("unsupported value width {width}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| TrainError::Checkpoint("config is not utf-8".into()))?;
        let kv = KeyValues::parse(cfg)?;
        kv.check_known(ModelConfig::KEYS)?;
        let mut config = ModelConfig::default();
        config.read_kv(&kv)?;
        let mut model = Self::new(&config, 0)?;
        let n = r.u64()? as usize;
        if n != model.store.len() {
            return Err(TrainError::Checkpoint(format!("{n} tensors, model has {}", model.store.len())));
        }
        for p in model.store.iter_mut() {
            let name_len = r.u16()? as usize;
            let name = r.take(name_len)?;
            if name != p.name.as_bytes() {
                return Err(TrainError::Checkpoint(format!("expected tensor {:?}, found {:?}", p.name, String::from_utf8_lossy(name))));
            }
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            if shape != p.value.shape() {
                return Err(TrainError::Checkpoint(format!("{}: shape {shape:?}, expected {:?}", p.name, p.value.shape())));
            }
            for v in p.value.data_mut() {
                let x = if width == 4 { f64::from(f32::from_le_bytes(r.array()?)) } else { f64::from_le_bytes(r.array()?) };
                *v = T::lit(x);
            }
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVAK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| TrainError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TrainError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
