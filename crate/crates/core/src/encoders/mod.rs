//! Per-modality feature extraction and sequence/width alignment.
//!
//! Encoders are frozen: the mock kind is a deterministic function of the input
//! and a seed, the external kind passes precomputed features through. The only
//! learnable piece is the projection used by [`align`].

pub mod features;

use ndarray::{s, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;

pub use features::{read_feature_file, write_feature_file, FeatureRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Video,
    Audio,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

/// A `(length × dim)` sequence for one modality with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEmbedding {
    pub data: Matrix,
    /// `true` marks a real token, `false` padding.
    pub mask: Vec<bool>,
    pub modality: Modality,
    /// Set when the encoder dropped input beyond `max_length`.
    pub truncated: bool,
}

impl ModalityEmbedding {
    pub fn new(data: Matrix, mask: Vec<bool>, modality: Modality) -> Result<Self> {
        let (len, dim) = data.dim();
        if len == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "{} embedding must have positive shape, got ({len} × {dim})",
                modality.as_str()
            )));
        }
        if mask.len() != len {
            return Err(Error::shape("embedding mask", len, mask.len()));
        }
        Ok(Self {
            data,
            mask,
            modality,
            truncated: false,
        })
    }

    /// Fully valid embedding.
    pub fn dense(data: Matrix, modality: Modality) -> Result<Self> {
        let len = data.nrows();
        Self::new(data, vec![true; len], modality)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Seeded deterministic stand-in for a pretrained encoder.
    Mock,
    /// Precomputed features, used as-is.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub output_dim: usize,
    pub max_length: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderSpec {
    pub fn mock(output_dim: usize, max_length: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Mock,
            output_dim,
            max_length,
            seed,
        }
    }

    pub fn external(output_dim: usize, max_length: usize) -> Self {
        Self {
            kind: EncoderKind::External,
            output_dim,
            max_length,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.max_length == 0 {
            return Err(Error::Config(
                "output_dim and max_length must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Row 0 of every mock text encoding.
const CLS_TOKEN: u64 = u64::MAX;

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn mock_token_vector(token: u64, spec: &EncoderSpec) -> impl Iterator<Item = f64> {
    let mut rng = seeded_rng(&[b"text", &spec.seed.to_le_bytes(), &token.to_le_bytes()]);
    (0..spec.output_dim).map(move |_| StandardNormal.sample(&mut rng))
}

/// Encode token ids; row 0 is the CLS token, so at most `max_length - 1`
/// ids are kept.
pub fn encode_text(tokens: &[u32], spec: &EncoderSpec) -> Result<ModalityEmbedding> {
    spec.validate()?;
    if tokens.is_empty() {
        return Err(Error::invalid("text token sequence is empty"));
    }
    if spec.kind != EncoderKind::Mock {
        return Err(Error::invalid(
            "external text encoders consume precomputed features, not token ids",
        ));
    }
    let keep = tokens.len().min(spec.max_length.saturating_sub(1));
    let len = keep + 1;
    let mut data = Matrix::zeros((len, spec.output_dim));
    let ids = std::iter::once(CLS_TOKEN).chain(tokens[..keep].iter().map(|&t| t as u64));
    for (mut row, id) in data.rows_mut().into_iter().zip(ids) {
        for (dst, v) in row.iter_mut().zip(mock_token_vector(id, spec)) {
            *dst = v;
        }
    }
    let mut emb = ModalityEmbedding::dense(data, Modality::Text)?;
    emb.truncated = keep < tokens.len();
    if emb.truncated {
        log::warn!(
            "text truncated from {} to {} tokens (max_length {})",
            tokens.len(),
            keep,
            spec.max_length
        );
    }
    Ok(emb)
}

/// Encode precomputed text features (external text encoders). Row 0 is
/// taken to be the CLS position.
pub fn encode_text_features(features: ArrayView2<f64>, spec: &EncoderSpec) -> Result<ModalityEmbedding> {
    encode_frames(features, Modality::Text, spec)
}

pub fn encode_video(frames: ArrayView2<f64>, spec: &EncoderSpec) -> Result<ModalityEmbedding> {
    encode_frames(frames, Modality::Video, spec)
}

pub fn encode_audio(waveform: ArrayView2<f64>, spec: &EncoderSpec) -> Result<ModalityEmbedding> {
    encode_frames(waveform, Modality::Audio, spec)
}

fn encode_frames(
    frames: ArrayView2<f64>,
    modality: Modality,
    spec: &EncoderSpec,
) -> Result<ModalityEmbedding> {
    spec.validate()?;
    let (len, in_dim) = frames.dim();
    if len == 0 || in_dim == 0 {
        return Err(Error::invalid(format!(
            "{} input is empty ({len} × {in_dim})",
            modality.as_str()
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{} input has non-finite values",
            modality.as_str()
        )));
    }
    let keep = len.min(spec.max_length);
    let frames = frames.slice(s![..keep, ..]);
    let data = match spec.kind {
        EncoderKind::Mock => frames.dot(&mock_projection(modality, in_dim, spec)),
        EncoderKind::External => {
            if in_dim != spec.output_dim {
                return Err(Error::shape(
                    "external encoder features",
                    format!("dim {}", spec.output_dim),
                    format!("dim {in_dim}"),
                ));
            }
            frames.to_owned()
        }
    };
    let mut emb = ModalityEmbedding::dense(data, modality)?;
    emb.truncated = keep < len;
    if emb.truncated {
        log::warn!(
            "{} truncated from {len} to {keep} frames",
            modality.as_str()
        );
    }
    Ok(emb)
}

fn mock_projection(modality: Modality, in_dim: usize, spec: &EncoderSpec) -> Matrix {
    let mut rng = seeded_rng(&[
        modality.as_str().as_bytes(),
        &spec.seed.to_le_bytes(),
        &(in_dim as u64).to_le_bytes(),
        &(spec.output_dim as u64).to_le_bytes(),
    ]);
    let scale = 1.0 / (in_dim as f64).sqrt();
    Matrix::from_shape_fn((in_dim, spec.output_dim), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

/// Source rows for resizing a sequence of `len` rows to `target_len`:
/// identity when it fits, uniform stride `⌊i·len/target_len⌋` otherwise.
pub fn alignment_rows(len: usize, target_len: usize) -> Vec<usize> {
    if len <= target_len {
        (0..len).collect()
    } else {
        (0..target_len).map(|i| i * len / target_len).collect()
    }
}

/// Resize `emb` to `target_len` rows and project it to the projection's
/// output width. Padding rows are zero and masked out.
pub fn align_graph(
    g: &mut Graph,
    emb: &ModalityEmbedding,
    target_len: usize,
    proj: &Linear,
) -> Result<(Var, Vec<bool>)> {
    let (d_in, _) = proj.dims(g.params());
    if target_len == 0 {
        return Err(Error::invalid("align target length must be positive"));
    }
    if emb.dim() != d_in {
        return Err(Error::shape(
            "align projection input",
            format!("dim {d_in}"),
            format!("dim {}", emb.dim()),
        ));
    }
    let rows = alignment_rows(emb.len(), target_len);
    let mut mask: Vec<bool> = rows.iter().map(|&r| emb.mask[r]).collect();
    let x = g.constant(emb.data.select(ndarray::Axis(0), &rows));
    let mut y = proj.forward(g, x);
    if rows.len() < target_len {
        y = g.pad_rows(y, target_len);
        mask.resize(target_len, false);
    }
    Ok((y, mask))
}

/// Value-level [`align_graph`].
pub fn align(
    emb: &ModalityEmbedding,
    target_len: usize,
    target_dim: usize,
    proj: &Linear,
    params: &ParamStore,
) -> Result<ModalityEmbedding> {
    let d_out = proj.dims(params).1;
    if target_dim != d_out {
        return Err(Error::shape("align target dim", d_out, target_dim));
    }
    let mut g = Graph::new(params);
    let (y, mask) = align_graph(&mut g, emb, target_len, proj)?;
    let mut out = ModalityEmbedding::new(g.value(y).clone(), mask, emb.modality)?;
    out.truncated = emb.truncated;
    Ok(out)
}
