//! Frozen stand-in for a pretrained speech encoder.
//!
//! A seeded stack of fixed random `tanh` projections. Input frames are
//! padded with zeros or truncated to a configured frame count, so every
//! output has the same `T`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{Gender, MetadataRecord, Pitch, Speed, Volume};
use crate::nn::Linear;
use crate::rng::{derive_seed, normal_tensor, rng_for};
use crate::tensor::{kernels, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("audio `{0}` has no feature frames")]
    Empty(String),
    #[error("audio `{audio_id}` has {got} feature dims, encoder expects {want}")]
    FeatureDim {
        audio_id: String,
        got: usize,
        want: usize,
    },
    #[error("layer selection {index} out of range for {layers} encoder layers")]
    LayerSelection { index: usize, layers: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("no transcript for audio `{0}`")]
    MissingTranscript(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub dim: usize,
    /// Output frame count; inputs are padded or truncated to it.
    pub frames: usize,
    pub feature_dim: usize,
    /// Layers fed to the adapter. `None` keeps all of them.
    pub select: Option<Vec<usize>>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            dim: 16,
            frames: 50,
            feature_dim: 12,
            select: None,
        }
    }
}

impl EncoderConfig {
    /// Number of layers the adapter sees after selection.
    pub fn selected_layers(&self) -> usize {
        self.select.as_ref().map_or(self.num_layers, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.dim == 0 || self.frames == 0 || self.feature_dim == 0 {
            return Err(EncoderError::Config("layers, dim, frames and feature_dim must be positive".into()));
        }
        if let Some(sel) = &self.select {
            if sel.is_empty() {
                return Err(EncoderError::Config("empty layer selection".into()));
            }
            if let Some(&index) = sel.iter().find(|&&i| i >= self.num_layers) {
                return Err(EncoderError::LayerSelection {
                    index,
                    layers: self.num_layers,
                });
            }
        }
        Ok(())
    }
}

/// Per-layer hidden states, each `T × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub layers: Vec<Tensor>,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, Tensor::cols)
    }

    /// Keeps only the listed layers, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Result<EncoderOutput> {
        let layers = indices
            .iter()
            .map(|&i| {
                self.layers.get(i).cloned().ok_or(EncoderError::LayerSelection {
                    index: i,
                    layers: self.layers.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderOutput { layers })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStub {
    config: EncoderConfig,
    store: ParamStore,
    layers: Vec<Linear>,
}

impl EncoderStub {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "encoder");
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let d_in = if l == 0 { config.feature_dim } else { config.dim };
            let lin = Linear::new(&mut store, &format!("encoder.layer{l}"), d_in, config.dim, &mut rng, true)?;
            // Gain above 1/sqrt(d) keeps deeper layers from collapsing toward zero.
            for v in store.get_mut(lin.w).tensor.data_mut() {
                *v *= 1.5;
            }
            store.get_mut(lin.b).tensor = normal_tensor(&mut rng, &[config.dim], 0.1);
            layers.push(lin);
        }
        Ok(Self { config, store, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes one feature file. Deterministic and side-effect free.
    pub fn encode(&self, file: &AudioFeatureFile) -> Result<EncoderOutput> {
        let x = &file.features;
        if x.rank() != 2 || x.rows() == 0 {
            return Err(EncoderError::Empty(file.audio_id.clone()));
        }
        if x.cols() != self.config.feature_dim {
            return Err(EncoderError::FeatureDim {
                audio_id: file.audio_id.clone(),
                got: x.cols(),
                want: self.config.feature_dim,
            });
        }
        let mut h = pad_or_truncate(x, self.config.frames);
        let mut out = Vec::with_capacity(self.layers.len());
        for lin in &self.layers {
            h = kernels::tanh(&lin.apply(&self.store, &h)?);
            out.push(h.clone());
        }
        let all = EncoderOutput { layers: out };
        match &self.config.select {
            Some(sel) => all.select(sel),
            None => Ok(all),
        }
    }

    /// SHA-256 over every stub weight.
    pub fn digest(&self) -> [u8; 32] {
        self.store.digest(|_| true)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }
}

fn pad_or_truncate(x: &Tensor, frames: usize) -> Tensor {
    let cols = x.cols();
    let keep = x.rows().min(frames);
    let mut data = x.data()[..keep * cols].to_vec();
    data.resize(frames * cols, 0.0);
    Tensor::new(&[frames, cols], data).expect("sized above")
}

/// Raw per-audio feature matrix `T₀ × F`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureFile {
    pub audio_id: String,
    pub features: Tensor,
}

const FEATURE_MAGIC: &[u8; 8] = b"DESTAFT1";

impl AudioFeatureFile {
    /// Layout: magic, `u32` id length, id bytes, `u64` rows, `u64` cols,
    /// then row-major little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.audio_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.audio_id.as_bytes());
        out.extend_from_slice(&(self.features.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.features.cols() as u64).to_le_bytes());
        out.extend_from_slice(&self.features.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != FEATURE_MAGIC {
            return Err("bad magic".into());
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|e| e.to_string())?;
        let n = u32::from_le_bytes(u32b) as usize;
        if r.len() < n {
            return Err("truncated id".into());
        }
        let audio_id = String::from_utf8(r[..n].to_vec()).map_err(|e| e.to_string())?;
        r = &r[n..];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|e| e.to_string())?;
        let rows = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u64b).map_err(|e| e.to_string())?;
        let cols = u64::from_le_bytes(u64b) as usize;
        if rows == 0 {
            return Err("zero frames".into());
        }
        let want = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or("size overflow")?;
        if r.len() != want {
            return Err(format!("payload is {} bytes, header implies {want}", r.len()));
        }
        let data = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let features = Tensor::new(&[rows, cols], data).map_err(|e| e.to_string())?;
        Ok(Self { audio_id, features })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| EncoderError::File {
                path: path.display().to_string(),
                msg: e.to_string(),
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |msg: String| EncoderError::File {
            path: path.display().to_string(),
            msg,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        Self::from_bytes(&bytes).map_err(err)
    }
}

/// Synthetic features whose statistics depend on the record's attributes,
/// so that an adapter has something to learn from.
///
/// Channels 0..5 carry gender, pitch contour, volume, speed and emotion;
/// the rest are seeded noise. Frame count shrinks for fast speech and grows
/// for slow speech.
pub fn synthesize_features(record: &MetadataRecord, feature_dim: usize, base_frames: usize, seed: u64) -> AudioFeatureFile {
    let frames = match record.speed {
        Speed::Slow => base_frames * 5 / 4,
        Speed::Fast => base_frames * 3 / 4,
        _ => base_frames,
    }
    .max(1);
    let label = format!("features/{}/{}", record.corpus, record.audio_id);
    let mut rng = rng_for(seed, &label);
    let mut x = normal_tensor(&mut rng, &[frames, feature_dim], 0.3);
    let gender = match record.gender {
        Gender::Female => 1.0,
        Gender::Male => -1.0,
        _ => 0.0,
    };
    let cycles = match record.pitch {
        Pitch::Low => 1.0,
        Pitch::Normal => 2.0,
        Pitch::High => 4.0,
        _ => 0.0,
    };
    let volume = match record.volume {
        Volume::Soft => 0.3,
        Volume::Normal => 1.0,
        Volume::Loud => 2.0,
        _ => 0.6,
    };
    let speed = match record.speed {
        Speed::Slow => -1.0,
        Speed::Fast => 1.0,
        _ => 0.0,
    };
    let emotion = record
        .emotion
        .as_deref()
        .map_or(0.0, |e| (derive_seed(0, e) % 1000) as f64 / 500.0 - 1.0);
    let signature = [gender, 0.0, volume, speed, emotion];
    for t in 0..frames {
        let phase = 2.0 * std::f64::consts::PI * cycles * t as f64 / frames as f64;
        let row = &mut x.data_mut()[t * feature_dim..(t + 1) * feature_dim];
        for (c, v) in row.iter_mut().enumerate().take(signature.len()) {
            *v += if c == 1 { phase.sin() } else { signature[c] };
        }
        for v in row.iter_mut() {
            *v *= volume;
        }
    }
    AudioFeatureFile {
        audio_id: record.audio_id.clone(),
        features: x,
    }
}

/// Pre-computed transcripts keyed by audio id.
#[derive(Clone, Debug, Default)]
pub struct TranscriptStore {
    entries: BTreeMap<String, String>,
}

impl TranscriptStore {
    pub fn from_records(records: &[MetadataRecord]) -> Self {
        Self {
            entries: records
                .iter()
                .map(|r| (r.audio_id.clone(), r.transcript.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn transcribe_lookup(&self, audio_id: &str) -> Result<&str> {
        self.entries
            .get(audio_id)
            .map(String::as_str)
            .ok_or_else(|| EncoderError::MissingTranscript(audio_id.to_string()))
    }
}
