//! Label descriptions, the triplet contrastive loss that pulls the pooled
//! multimodal token toward its label's descriptions, and the PCA view used to
//! inspect that effect.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::a_me::COSINE_EPS;
use crate::autodiff::Matrix;
use crate::config::{LossConfig, NegativesMode};
use crate::error::{Error, Result};

/// Name the out-of-scope class goes by in the bundled files.
pub const DEFAULT_OOS_LABEL: &str = "UNKNOWN";

const MINTREC_JSON: &str = include_str!("../data/mintrec.json");
const MINTREC2_JSON: &str = include_str!("../data/mintrec2.json");

/// On-disk description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionFile {
    #[serde(default)]
    pub prompt_template: String,
    pub labels: Vec<LabelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oos_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    pub name: String,
    pub descriptions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDescriptionBank {
    pub prompt_template: String,
    pub labels: Vec<String>,
    pub descriptions: Vec<Vec<String>>,
    /// Per label, `(m × d)` unit rows; filled by [`embed_descriptions`].
    pub embeddings: Option<Vec<Matrix>>,
    /// Excluded from contrastive learning.
    pub oos_label: Option<String>,
}

impl LabelDescriptionBank {
    pub fn from_file(file: DescriptionFile) -> Result<Self> {
        let err = |m: String| Err(Error::Descriptions(m));
        let mut oos_label = file.oos_label.clone();
        let mut labels = Vec::new();
        let mut descriptions = Vec::new();
        let mut seen = HashSet::new();
        for entry in file.labels {
            let name = entry.name.trim().to_string();
            if name.is_empty() {
                return err("label with an empty name".into());
            }
            if !seen.insert(name.clone()) {
                return err(format!("duplicate label `{name}`"));
            }
            let is_oos = oos_label.as_deref() == Some(name.as_str())
                || (oos_label.is_none() && name == DEFAULT_OOS_LABEL && entry.descriptions.is_empty());
            if is_oos {
                oos_label = Some(name);
                continue;
            }
            if entry.descriptions.iter().any(|d| d.trim().is_empty()) {
                return err(format!("label `{name}` has an empty description"));
            }
            labels.push(name);
            descriptions.push(entry.descriptions);
        }
        if labels.is_empty() {
            return err("no in-scope labels".into());
        }
        let m = descriptions[0].len();
        if m < 2 {
            return err(format!(
                "label `{}` has {m} description(s); at least 2 are required",
                labels[0]
            ));
        }
        for (name, d) in labels.iter().zip(&descriptions) {
            if d.len() != m {
                return err(format!(
                    "label `{name}` has {} descriptions but `{}` has {m}; counts must be uniform",
                    d.len(),
                    labels[0]
                ));
            }
        }
        Ok(Self {
            prompt_template: file.prompt_template,
            labels,
            descriptions,
            embeddings: None,
            oos_label,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DescriptionFile =
            serde_json::from_str(text).map_err(|e| Error::Descriptions(e.to_string()))?;
        Self::from_file(file)
    }

    /// The 20-label bundled file.
    pub fn bundled_mintrec() -> Self {
        Self::from_json(MINTREC_JSON).expect("bundled file is valid")
    }

    /// The 30-label bundled file with an out-of-scope class.
    pub fn bundled_mintrec2() -> Self {
        Self::from_json(MINTREC2_JSON).expect("bundled file is valid")
    }

    pub fn to_file(&self) -> DescriptionFile {
        DescriptionFile {
            prompt_template: self.prompt_template.clone(),
            labels: self
                .labels
                .iter()
                .zip(&self.descriptions)
                .map(|(n, d)| LabelEntry {
                    name: n.clone(),
                    descriptions: d.clone(),
                })
                .collect(),
            oos_label: self.oos_label.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Descriptions per label.
    pub fn m(&self) -> usize {
        self.descriptions[0].len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn is_oos(&self, label: &str) -> bool {
        self.oos_label.as_deref() == Some(label)
    }

    /// Keep the first `m` descriptions of every label.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Descriptions(format!(
                "{m} description(s) per label requested; at least 2 are required"
            )));
        }
        if m > self.m() {
            return Err(Error::Descriptions(format!(
                "{m} descriptions per label requested but the bank has only {}",
                self.m()
            )));
        }
        let mut out = self.clone();
        for d in &mut out.descriptions {
            d.truncate(m);
        }
        if let Some(emb) = &mut out.embeddings {
            for e in emb {
                *e = e.slice(ndarray::s![..m, ..]).to_owned();
            }
        }
        Ok(out)
    }

    /// Restrict to `names` (in that order), keeping the OOS label if named.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let mut out = self.clone();
        out.labels.clear();
        out.descriptions.clear();
        let mut emb = self.embeddings.as_ref().map(|_| Vec::new());
        for n in names {
            if self.is_oos(n) {
                continue;
            }
            let i = self
                .index_of(n)
                .ok_or_else(|| Error::Descriptions(format!("missing label `{n}`")))?;
            out.labels.push(n.clone());
            out.descriptions.push(self.descriptions[i].clone());
            if let (Some(dst), Some(src)) = (&mut emb, &self.embeddings) {
                dst.push(src[i].clone());
            }
        }
        out.embeddings = emb;
        Ok(out)
    }

    pub fn embedding(&self, label: usize) -> Result<&Matrix> {
        self.embeddings
            .as_ref()
            .map(|e| &e[label])
            .ok_or_else(|| Error::Descriptions("bank has not been embedded".into()))
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embeddings.as_ref().map(|e| e[0].ncols())
    }
}

pub fn load_descriptions(path: &Path) -> Result<LabelDescriptionBank> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelDescriptionBank::from_json(&text)
        .map_err(|e| Error::Descriptions(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Mock,
    /// Vectors looked up by description text in a JSON file.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptionEmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    /// `{"dim": d, "embeddings": {"<description>": [..]}}` for the external kind.
    pub path: Option<PathBuf>,
}

impl Default for DescriptionEmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Mock,
            dim: 32,
            seed: 17,
            path: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub embeddings: HashMap<String, Vec<f32>>,
}

fn mock_sentence_vector(text: &str, spec: &DescriptionEmbedderSpec) -> Array1<f64> {
    let mut hasher = Sha256::new();
    hasher.update(spec.seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    Array1::from_shape_fn(spec.dim, |_| StandardNormal.sample(&mut rng))
}

fn unit(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Embed every description and L2-normalize the rows.
pub fn embed_descriptions(
    bank: &LabelDescriptionBank,
    spec: &DescriptionEmbedderSpec,
) -> Result<LabelDescriptionBank> {
    if spec.dim == 0 {
        return Err(Error::Config("embedder.dim must be positive".into()));
    }
    let lookup = match spec.kind {
        EmbedderKind::Mock => None,
        EmbedderKind::External => {
            let path = spec.path.as_ref().ok_or_else(|| {
                Error::Config("embedder.kind = external requires embedder.path".into())
            })?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let ext: ExternalEmbeddings =
                serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            if ext.dim != spec.dim {
                return Err(Error::shape("external description embeddings", spec.dim, ext.dim));
            }
            Some(ext)
        }
    };
    let mut out = bank.clone();
    let mut all = Vec::with_capacity(bank.len());
    for descs in &bank.descriptions {
        let mut m = Matrix::zeros((descs.len(), spec.dim));
        for (mut row, text) in m.rows_mut().into_iter().zip(descs) {
            let v = match &lookup {
                None => mock_sentence_vector(text, spec),
                Some(ext) => {
                    let raw = ext.embeddings.get(text).ok_or_else(|| {
                        Error::Descriptions(format!("no external embedding for `{text}`"))
                    })?;
                    if raw.len() != spec.dim {
                        return Err(Error::shape("external description vector", spec.dim, raw.len()));
                    }
                    raw.iter().map(|&x| x as f64).collect()
                }
            };
            row.assign(&unit(v));
        }
        all.push(m);
    }
    out.embeddings = Some(all);
    Ok(out)
}

/// Guarded cosine similarity and its gradient with respect to `t`.
fn cosine_with_grad(t: ArrayView1<f64>, s: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let nt = t.dot(&t).sqrt();
    let ns = s.dot(&s).sqrt();
    let dot = t.dot(&s);
    if nt * ns > COSINE_EPS {
        let c = dot / (nt * ns);
        let g = &s / (nt * ns) - &t * (c / (nt * nt));
        (c, g)
    } else {
        (dot / COSINE_EPS, &s / COSINE_EPS)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletOptions {
    pub tau: f64,
    pub negatives: NegativesMode,
    pub include_positive_in_denominator: bool,
}

impl From<&LossConfig> for TripletOptions {
    fn from(c: &LossConfig) -> Self {
        Self {
            tau: c.tau,
            negatives: c.negatives,
            include_positive_in_denominator: c.include_positive_in_denominator,
        }
    }
}

impl Default for TripletOptions {
    fn default() -> Self {
        (&LossConfig::default()).into()
    }
}

#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub value: f64,
    /// Gradient with respect to the loss input, same shape.
    pub grad: Matrix,
    /// Samples that contributed to the average.
    pub contributing: usize,
}

/// Triplet contrastive loss over a batch of pooled tokens.
///
/// `labels[i]` is the bank index of sample `i`, or `None` for an
/// out-of-scope sample, which contributes nothing. For an in-scope sample
/// with label `p`:
///
/// ```text
/// loss_i = -log( Σ_j exp(sim(t_i, S^p_j)/τ) / Σ_{k∈neg(i)} Σ_j exp(sim(t_i, S^k_j)/τ) )
/// ```
///
/// and the result is the mean over contributing samples. With
/// [`NegativesMode::Label`] the negatives are all other bank labels; with
/// [`NegativesMode::Batch`] they are the labels of the other batch members,
/// skipping members that share the sample's label or are out of scope.
/// Samples left without negatives do not contribute. If nothing
/// contributes the loss is 0.
pub fn triplet_contrastive_loss(
    tokens: ArrayView2<f64>,
    labels: &[Option<usize>],
    bank: &LabelDescriptionBank,
    opts: &TripletOptions,
) -> Result<LossWithGrad> {
    if !(opts.tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {}", opts.tau)));
    }
    let (n, d) = tokens.dim();
    if labels.len() != n {
        return Err(Error::shape("triplet loss labels", n, labels.len()));
    }
    let emb = bank
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Descriptions("bank has not been embedded".into()))?;
    if let Some(dim) = bank.embedding_dim() {
        if dim != d {
            return Err(Error::shape("triplet loss token dim", dim, d));
        }
    }
    for l in labels.iter().flatten() {
        if *l >= bank.len() {
            return Err(Error::invalid(format!(
                "label index {l} outside bank of {} labels",
                bank.len()
            )));
        }
    }

    let mut total = 0.0;
    let mut grad = Matrix::zeros((n, d));
    let mut contributing = 0;
    let mut logits = Vec::new();
    let mut grads = Vec::new();
    for i in 0..n {
        let Some(pos) = labels[i] else { continue };
        let negatives: Vec<usize> = match opts.negatives {
            NegativesMode::Label => (0..bank.len()).filter(|&k| k != pos).collect(),
            NegativesMode::Batch => labels
                .iter()
                .enumerate()
                .filter_map(|(j, l)| match l {
                    Some(k) if j != i && *k != pos => Some(*k),
                    _ => None,
                })
                .collect(),
        };
        if negatives.is_empty() && !opts.include_positive_in_denominator {
            continue;
        }
        let t = tokens.row(i);

        let (num_logits, num_grads): (Vec<f64>, Vec<Array1<f64>>) = emb[pos]
            .rows()
            .into_iter()
            .map(|s| {
                let (c, g) = cosine_with_grad(t, s);
                (c / opts.tau, g)
            })
            .unzip();
        logits.clear();
        grads.clear();
        let den_labels = negatives
            .iter()
            .copied()
            .chain(opts.include_positive_in_denominator.then_some(pos));
        for k in den_labels {
            for s in emb[k].rows() {
                let (c, g) = cosine_with_grad(t, s);
                logits.push(c / opts.tau);
                grads.push(g);
            }
        }
        let num = log_sum_exp(&num_logits);
        let den = log_sum_exp(&logits);
        total += den - num;
        contributing += 1;

        let mut gi = Array1::<f64>::zeros(d);
        for (l, g) in logits.iter().zip(&grads) {
            gi.scaled_add((l - den).exp() / opts.tau, g);
        }
        for (l, g) in num_logits.iter().zip(&num_grads) {
            gi.scaled_add(-(l - num).exp() / opts.tau, g);
        }
        grad.row_mut(i).assign(&gi);
    }
    if contributing == 0 {
        log::warn!("triplet loss: no contributing samples in batch, loss set to 0");
        return Ok(LossWithGrad {
            value: 0.0,
            grad,
            contributing,
        });
    }
    let c = contributing as f64;
    grad /= c;
    Ok(LossWithGrad {
        value: total / c,
        grad,
        contributing,
    })
}

/// Two-dimensional PCA of a point cloud.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `(n × 2)` coordinates of the centered points.
    pub coords: Matrix,
    /// `(2 × d)` principal axes, largest variance first.
    pub components: Matrix,
    /// Variance along each axis.
    pub variances: [f64; 2],
}

/// Principal axes via SVD of the centered data. Each axis is signed so that
/// its largest-magnitude entry is positive.
pub fn pca_2d(points: &Matrix) -> Result<PcaProjection> {
    let (n, d) = points.dim();
    if n < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 points, got {n}")));
    }
    let mean = points.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = points - &mean;
    let total_var: f64 = centered.iter().map(|v| v * v).sum();
    if total_var <= 1e-24 {
        return Err(Error::invalid("PCA input is degenerate: all points are identical"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut components = Matrix::zeros((2, d));
    let mut variances = [0.0; 2];
    for (axis, &r) in order.iter().take(2).enumerate() {
        let mut comp: Vec<f64> = (0..d).map(|j| v_t[(r, j)]).collect();
        let pivot = comp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if comp[pivot] < 0.0 {
            comp.iter_mut().for_each(|c| *c = -*c);
        }
        for (j, c) in comp.into_iter().enumerate() {
            components[[axis, j]] = c;
        }
        variances[axis] = svd.singular_values[r].powi(2) / (n as f64 - 1.0);
    }
    let coords = centered.dot(&components.t());
    Ok(PcaProjection {
        coords,
        components,
        variances,
    })
}

/// Per-axis min-max scaling to `[0, 1]`; a constant axis maps to 0.
pub fn min_max_normalize(coords: &Matrix) -> Matrix {
    let mut out = coords.clone();
    for mut col in out.columns_mut() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        col.mapv_inplace(|v| if span > 1e-12 { (v - lo) / span } else { 0.0 });
    }
    out
}

/// Normalized 2-D coordinates grouped by role.
#[derive(Clone, Debug)]
pub struct SemanticAnalysis {
    /// Mean-pooled tokens before the token MLP.
    pub mean_tokens: Matrix,
    /// Synchronized tokens.
    pub ss_tokens: Matrix,
    pub descriptions: Matrix,
}

/// Fit a joint PCA over both token sets and the description embeddings,
/// then scale each axis to `[0, 1]`.
pub fn pca_semantic_analysis(
    tokens_before: &Matrix,
    tokens_after: &Matrix,
    label_desc_embeddings: &Matrix,
) -> Result<SemanticAnalysis> {
    let d = label_desc_embeddings.ncols();
    for (name, m) in [("before", tokens_before), ("after", tokens_after)] {
        if m.nrows() > 0 && m.ncols() != d {
            return Err(Error::shape("pca tokens", d, format!("{} ({name})", m.ncols())));
        }
    }
    let parts: Vec<_> = [tokens_before, tokens_after, label_desc_embeddings]
        .iter()
        .filter(|m| m.nrows() > 0)
        .map(|m| m.view())
        .collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &parts)
        .map_err(|e| Error::invalid(format!("pca inputs: {e}")))?;
    let proj = pca_2d(&all)?;
    let norm = min_max_normalize(&proj.coords);
    let (a, b) = (tokens_before.nrows(), tokens_after.nrows());
    Ok(SemanticAnalysis {
        mean_tokens: norm.slice(ndarray::s![..a, ..]).to_owned(),
        ss_tokens: norm.slice(ndarray::s![a..a + b, ..]).to_owned(),
        descriptions: norm.slice(ndarray::s![a + b.., ..]).to_owned(),
    })
}

/// CSV with header `role,label,x,y`.
pub fn write_analysis_csv(path: &Path, label: &str, analysis: &SemanticAnalysis) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["role", "label", "x", "y"])?;
    for (role, m) in [
        ("mean", &analysis.mean_tokens),
        ("ss", &analysis.ss_tokens),
        ("description", &analysis.descriptions),
    ] {
        for row in m.rows() {
            w.write_record([role, label, &row[0].to_string(), &row[1].to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
