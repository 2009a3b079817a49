//! Transformer stack over the fused sequence, the single-token projection,
//! the classifier head, the joint objective and checkpoints.

use std::path::Path;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::a_me::{AmeConfig, AnchorEmbedding, CrossAttentionBlock};
use crate::autodiff::{Gradients, Graph, Matrix, ParamStore, Var};
use crate::config::{EncoderStackKind, Pooling, TrainConfig};
use crate::encoders::ModalityEmbedding;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::semantic_sync::{triplet_contrastive_loss, LabelDescriptionBank, TripletOptions};

/// Post-LN transformer encoder layer with masked self-attention.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    /// Self-attention projections and the position-wise feedforward.
    pub block: CrossAttentionBlock,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_hidden: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            block: CrossAttentionBlock::new(params, name, d_model, heads, ff_hidden, rng),
            output: Linear::new(params, &format!("{name}.output"), d_model, d_model, true, rng),
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), d_model, eps),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), d_model, eps),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Var {
        let (a, _) = self.block.attend(g, x, x, Some(mask));
        let a = self.output.forward(g, a);
        let h = g.add(x, a);
        let h = self.norm1.forward(g, h);
        let f = self.block.ff.forward(g, h);
        let o = g.add(h, f);
        self.norm2.forward(g, o)
    }
}

#[derive(Clone, Debug)]
pub struct MultimodalEncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub kind: EncoderStackKind,
}

impl MultimodalEncoderStack {
    pub fn new(params: &mut ParamStore, config: &TrainConfig, rng: &mut impl Rng) -> Self {
        let m = &config.model;
        let layers = (0..m.encoder_depth)
            .map(|i| {
                EncoderLayer::new(
                    params,
                    &format!("encoder.layer{i}"),
                    m.d_t,
                    m.heads,
                    m.encoder_ff_hidden,
                    m.layer_norm_eps,
                    rng,
                )
            })
            .collect();
        Self {
            layers,
            kind: m.encoder_kind,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, e_m: Var, mask: &[bool]) -> Result<Var> {
        if g.shape(e_m).0 != mask.len() {
            return Err(Error::shape("encode_multimodal mask", g.shape(e_m).0, mask.len()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("encode_multimodal: mask has no valid positions"));
        }
        Ok(self.layers.iter().fold(e_m, |x, l| l.forward(g, x, mask)))
    }
}

/// Value-level stack forward.
pub fn encode_multimodal(
    params: &ParamStore,
    stack: &MultimodalEncoderStack,
    e_m: &Matrix,
    mask: &[bool],
    d_t: usize,
) -> Result<Matrix> {
    if e_m.ncols() != d_t {
        return Err(Error::shape("encode_multimodal input", format!("dim {d_t}"), format!("dim {}", e_m.ncols())));
    }
    let mut g = Graph::new(params);
    let x = g.constant(e_m.clone());
    let y = stack.forward(&mut g, x, mask)?;
    Ok(g.value(y).clone())
}

/// Pooling over the sequence followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TokenProjector {
    pub pooling: Pooling,
    pub mlp: FeedForward,
}

/// Intermediate and final token of [`TokenProjector::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ProjectedToken {
    pub pooled: Var,
    pub token: Var,
}

impl TokenProjector {
    pub fn new(params: &mut ParamStore, d_t: usize, pooling: Pooling, rng: &mut impl Rng) -> Self {
        Self {
            pooling,
            mlp: FeedForward::new(params, "projector.mlp", d_t, d_t, rng),
        }
    }

    /// Mean pooling averages the valid positions only.
    pub fn forward(&self, g: &mut Graph, e_f: Var, mask: &[bool]) -> ProjectedToken {
        let pooled = match self.pooling {
            Pooling::Mean => g.masked_mean_rows(e_f, mask),
            Pooling::Cls => g.gather_rows(e_f, &[0]),
        };
        let token = self.mlp.forward(g, pooled);
        ProjectedToken { pooled, token }
    }
}

pub fn project_token(
    params: &ParamStore,
    projector: &TokenProjector,
    e_f: &Matrix,
    mask: &[bool],
) -> Result<Matrix> {
    if mask.len() != e_f.nrows() || !mask.iter().any(|&m| m) {
        return Err(Error::invalid("project_token needs a mask with at least one valid row"));
    }
    let mut g = Graph::new(params);
    let x = g.constant(e_f.clone());
    let t = projector.forward(&mut g, x, mask);
    Ok(g.value(t.token).clone())
}

/// `Linear(LayerNorm([E_f[0] ; T_f]))`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub label_count: usize,
}

impl ClassifierHead {
    pub fn new(params: &mut ParamStore, d_t: usize, labels: usize, eps: f64, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(params, "head.norm", 2 * d_t, eps),
            linear: Linear::new(params, "head.linear", 2 * d_t, labels, true, rng),
            label_count: labels,
        }
    }

    pub fn forward(&self, g: &mut Graph, e_f: Var, t_f: Var) -> Var {
        let cls = g.gather_rows(e_f, &[0]);
        let x = g.concat_cols(&[cls, t_f]);
        let x = self.norm.forward(g, x);
        self.linear.forward(g, x)
    }
}

pub fn classify(
    params: &ParamStore,
    head: &ClassifierHead,
    e_f: &Matrix,
    t_f: &Matrix,
) -> Result<Matrix> {
    let width = head.norm_width(params);
    if e_f.ncols() + t_f.ncols() != width || t_f.nrows() != 1 {
        return Err(Error::shape(
            "classify input",
            format!("E_f and 1-row T_f of total width {width}"),
            format!("{}+{} ({} rows)", e_f.ncols(), t_f.ncols(), t_f.nrows()),
        ));
    }
    let mut g = Graph::new(params);
    let e = g.constant(e_f.clone());
    let t = g.constant(t_f.clone());
    let logits = head.forward(&mut g, e, t);
    Ok(g.value(logits).clone())
}

impl ClassifierHead {
    fn norm_width(&self, params: &ParamStore) -> usize {
        params.get(self.norm.gamma).ncols()
    }
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits.
pub fn cross_entropy_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, l) = logits.dim();
    if labels.len() != n {
        return Err(Error::shape("cross_entropy labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::invalid("cross_entropy on an empty batch"));
    }
    let mut grad = Matrix::zeros((n, l));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= l {
            return Err(Error::LabelMismatch(format!("label {y} outside {l} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        for j in 0..l {
            grad[[i, j]] = (row[j] - lse).exp() / n as f64;
        }
        grad[[i, y]] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Unweighted sum of the two objectives.
pub fn total_loss(l_tri: f64, l_cls: f64) -> Result<f64> {
    if !l_tri.is_finite() || !l_cls.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite loss component (triplet {l_tri}, classification {l_cls})"
        )));
    }
    Ok(l_tri + l_cls)
}

/// One encoded example ready for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub text: ModalityEmbedding,
    pub video: ModalityEmbedding,
    pub audio: ModalityEmbedding,
    /// Index into the model's label space.
    pub label: usize,
}

/// Graph handles for one sample.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub e_f: Var,
    pub pooled: Var,
    pub t_f: Var,
    pub logits: Var,
    pub video_anchor_indices: Vec<usize>,
    pub audio_anchor_indices: Vec<usize>,
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub triplet: f64,
    pub classification: f64,
}

#[derive(Clone, Debug)]
pub struct AmessModel {
    pub config: TrainConfig,
    pub label_space: Vec<String>,
    pub input_dims: [usize; 3],
    pub params: ParamStore,
    pub ame: AnchorEmbedding,
    pub encoder: MultimodalEncoderStack,
    pub projector: TokenProjector,
    pub head: ClassifierHead,
}

impl AmessModel {
    /// Fresh model; parameters are drawn from a stream derived from the seed.
    pub fn new(config: &TrainConfig, label_space: Vec<String>, input_dims: [usize; 3]) -> Result<Self> {
        config.validate()?;
        if label_space.len() < 2 {
            return Err(Error::invalid("label space needs at least 2 classes"));
        }
        if input_dims.contains(&0) {
            return Err(Error::invalid("encoder output dims must be positive"));
        }
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let ame = AnchorEmbedding::new(
            &mut params,
            AmeConfig {
                l_t: m.l_t,
                d_t: m.d_t,
                k: m.k,
                heads: m.heads,
                ff_hidden: m.block_ff_hidden,
                dropout: m.dropout,
                layer_norm_eps: m.layer_norm_eps,
            },
            input_dims,
            &mut rng,
        );
        let encoder = MultimodalEncoderStack::new(&mut params, config, &mut rng);
        let projector = TokenProjector::new(&mut params, m.d_t, m.pooling, &mut rng);
        let head = ClassifierHead::new(&mut params, m.d_t, label_space.len(), m.layer_norm_eps, &mut rng);
        let mut model = Self {
            config: config.clone(),
            label_space,
            input_dims,
            params,
            ame,
            encoder,
            projector,
            head,
        };
        if m.encoder_kind == EncoderStackKind::External {
            let path = m.encoder_weights.clone().ok_or_else(|| {
                Error::Config("model.encoder_kind = external requires model.encoder_weights".into())
            })?;
            model.load_encoder_weights(&path)?;
        }
        model.params.quantize_f32();
        Ok(model)
    }

    pub fn label_count(&self) -> usize {
        self.label_space.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Copy every `encoder.*` parameter from a checkpoint file.
    pub fn load_encoder_weights(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::read(path)?;
        let mut copied = 0;
        for (id, name, value) in self.params.iter().map(|(i, n, v)| (i, n.to_string(), v.dim())).collect::<Vec<_>>() {
            if !name.starts_with("encoder.") {
                continue;
            }
            let p = ck.params.iter().find(|p| p.name == name).ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing encoder parameter `{name}`", path.display()))
            })?;
            *self.params.get_mut(id) = p.to_matrix(value, path)?;
            copied += 1;
        }
        log::info!("loaded {copied} encoder tensors from {}", path.display());
        Ok(())
    }

    /// Records one sample's forward pass. Pass an RNG to enable dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        sample: &Sample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SampleTrace> {
        let ame = self.ame.forward_graph(g, &sample.text, &sample.video, &sample.audio, rng)?;
        let e_f = self.encoder.forward(g, ame.e_m, &ame.text_mask)?;
        let tok = self.projector.forward(g, e_f, &ame.text_mask);
        let logits = self.head.forward(g, e_f, tok.token);
        Ok(SampleTrace {
            e_f,
            pooled: tok.pooled,
            t_f: tok.token,
            logits,
            video_anchor_indices: ame.video_anchor_indices,
            audio_anchor_indices: ame.audio_anchor_indices,
        })
    }

    /// Bank index for each label-space entry; `None` for classes outside the
    /// bank (the out-of-scope class).
    pub fn bank_indices(&self, bank: &LabelDescriptionBank) -> Result<Vec<Option<usize>>> {
        self.label_space
            .iter()
            .map(|l| match bank.index_of(l) {
                Some(i) => Ok(Some(i)),
                None if bank.is_oos(l) => Ok(None),
                None => Err(Error::LabelMismatch(format!(
                    "label `{l}` has no descriptions in the bank"
                ))),
            })
            .collect()
    }

    /// Records the joint loss over a batch and returns its root.
    pub fn batch_loss_graph(
        &self,
        g: &mut Graph,
        batch: &[&Sample],
        bank: &LabelDescriptionBank,
        bank_index: &[Option<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, BatchLoss)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut tokens = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        for s in batch {
            if s.label >= self.label_count() {
                return Err(Error::LabelMismatch(format!(
                    "sample `{}` label index {} outside {} classes",
                    s.id,
                    s.label,
                    self.label_count()
                )));
            }
            let tr = self.forward_graph(g, s, rng.as_deref_mut())?;
            tokens.push(tr.t_f);
            logits.push(tr.logits);
        }
        let tokens = g.concat_rows(&tokens);
        let logits = g.concat_rows(&logits);
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let bank_labels: Vec<Option<usize>> = labels.iter().map(|&l| bank_index[l]).collect();

        let opts = TripletOptions::from(&self.config.loss);
        let tri = triplet_contrastive_loss(g.value(tokens).view(), &bank_labels, bank, &opts)?;
        let (ce, ce_grad) = cross_entropy_loss(g.value(logits).view(), &labels)?;
        let total = total_loss(tri.value, ce)?;
        let tri_var = g.scalar_with_grad(tokens, tri.value, tri.grad);
        let ce_var = g.scalar_with_grad(logits, ce, ce_grad);
        let root = g.weighted_sum(&[(tri_var, 1.0), (ce_var, 1.0)]);
        Ok((
            root,
            BatchLoss {
                total,
                triplet: tri.value,
                classification: ce,
            },
        ))
    }

    /// Loss and parameter gradients for a batch.
    pub fn loss_and_grad(
        &self,
        batch: &[&Sample],
        bank: &LabelDescriptionBank,
        bank_index: &[Option<usize>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(BatchLoss, Gradients)> {
        let mut g = Graph::new(&self.params);
        let (root, loss) = self.batch_loss_graph(&mut g, batch, bank, bank_index, rng)?;
        Ok((loss, g.backward(root)))
    }

    /// Eval-mode logits `(1 × L)`.
    pub fn logits(&self, sample: &Sample) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let tr = self.forward_graph(&mut g, sample, None)?;
        Ok(g.value(tr.logits).clone())
    }

    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        let l = self.logits(sample)?;
        Ok(argmax(l.row(0).iter().copied()))
    }

    /// Pooled sequence and synchronized token for a sample, each `(1 × d_t)`.
    pub fn tokens(&self, sample: &Sample) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new(&self.params);
        let tr = self.forward_graph(&mut g, sample, None)?;
        Ok((g.value(tr.pooled).clone(), g.value(tr.t_f).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            label_space: self.label_space.clone(),
            input_dims: self.input_dims,
            params: self
                .params
                .iter()
                .map(|(_, name, m)| StoredTensor {
                    name: name.to_string(),
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_header()?;
        let mut config = ck.config.clone();
        // Weights come from the checkpoint itself.
        config.model.encoder_kind = EncoderStackKind::Toy;
        let mut model = Self::new(&config, ck.label_space.clone(), ck.input_dims)
            .map_err(|e| Error::Checkpoint(format!("checkpoint config: {e}")))?;
        model.config = ck.config.clone();
        if ck.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for p in &ck.params {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", p.name)))?;
            let dim = model.params.get(id).dim();
            *model.params.get_mut(id) = p.to_matrix(dim, Path::new("<checkpoint>"))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub const CHECKPOINT_FORMAT: &str = "amess-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: run config, label space, encoder widths and every
/// parameter as row-major `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub label_space: Vec<String>,
    pub input_dims: [usize; 3],
    pub params: Vec<StoredTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

impl StoredTensor {
    fn to_matrix(&self, expected: (usize, usize), path: &Path) -> Result<Matrix> {
        if (self.shape[0], self.shape[1]) != expected || self.data.len() != expected.0 * expected.1 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor `{}` has shape {:?} ({} values), expected {:?}",
                path.display(),
                self.name,
                self.shape,
                self.data.len(),
                expected
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor `{}` has non-finite values", self.name)));
        }
        Ok(Matrix::from_shape_vec(expected, self.data.iter().map(|&v| v as f64).collect())
            .expect("checked shape"))
    }
}

impl Checkpoint {
    fn check_header(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ck.check_header()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;
    use crate::layers::Activation;
    use crate::semantic_sync::{embed_descriptions, DescriptionEmbedderSpec};
    use ndarray::{array, Array1, Axis};
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_shape_fn(shape, |_| StandardNormal.sample(rng))
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::toy();
        c.model.d_t = 4;
        c.model.l_t = 3;
        c.model.k = 2;
        c.model.block_ff_hidden = 1;
        c.model.encoder_depth = 0;
        c.model.dropout = 0.0;
        c.embedder.dim = 4;
        c
    }

    fn stack(depth: usize, d: usize, seed: u64) -> (ParamStore, MultimodalEncoderStack) {
        let mut c = TrainConfig::toy();
        c.model.d_t = d;
        c.model.encoder_depth = depth;
        c.model.encoder_ff_hidden = 3;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = MultimodalEncoderStack::new(&mut ps, &c, &mut rng);
        (ps, s)
    }

    fn random_sample(rng: &mut ChaCha8Rng, dims: [usize; 3], lens: [usize; 3], label: usize) -> Sample {
        let e = |m, l, d, rng: &mut ChaCha8Rng| ModalityEmbedding::dense(randn((l, d), rng), m).unwrap();
        Sample {
            id: format!("s{label}"),
            text: e(Modality::Text, lens[0], dims[0], rng),
            video: e(Modality::Video, lens[1], dims[1], rng),
            audio: e(Modality::Audio, lens[2], dims[2], rng),
            label,
        }
    }

    fn bank(labels: usize, d: usize) -> LabelDescriptionBank {
        let file = crate::semantic_sync::DescriptionFile {
            prompt_template: String::new(),
            labels: (0..labels)
                .map(|l| crate::semantic_sync::LabelEntry {
                    name: format!("L{l}"),
                    descriptions: vec![format!("first {l}"), format!("second {l}")],
                })
                .collect(),
            oos_label: None,
        };
        let b = LabelDescriptionBank::from_file(file).unwrap();
        embed_descriptions(&b, &DescriptionEmbedderSpec { dim: d, ..Default::default() }).unwrap()
    }

    // Hand-rolled encoder layer on plain matrices.
    fn ref_layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Matrix {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / (var + eps).sqrt() * gamma[[0, j]] + beta[[0, j]];
            }
        }
        out
    }

    fn ref_linear(ps: &ParamStore, l: &Linear, x: &Matrix) -> Matrix {
        let mut y = x.dot(ps.get(l.weight));
        if let Some(b) = l.bias {
            y += ps.get(b);
        }
        y
    }

    fn ref_encoder_layer(ps: &ParamStore, layer: &EncoderLayer, x: &Matrix, mask: &[bool]) -> Matrix {
        let b = &layer.block;
        let q = ref_linear(ps, &b.query, x);
        let k = ref_linear(ps, &b.key, x);
        let v = ref_linear(ps, &b.value, x);
        let n = x.nrows();
        let d = x.ncols() as f64;
        let mut a = Matrix::zeros(x.dim());
        for i in 0..n {
            let mut w = vec![0.0; n];
            let mut sum = 0.0;
            for j in 0..n {
                if mask[j] {
                    w[j] = (q.row(i).dot(&k.row(j)) / d.sqrt()).exp();
                    sum += w[j];
                }
            }
            for j in 0..n {
                let coef = w[j] / sum;
                for c in 0..x.ncols() {
                    a[[i, c]] += coef * v[[j, c]];
                }
            }
        }
        let a = ref_linear(ps, &layer.output, &a);
        let ln = |n: &LayerNorm, m: &Matrix| ref_layer_norm(m, ps.get(n.gamma), ps.get(n.beta), n.eps);
        let h = ln(&layer.norm1, &(x + &a));
        let up = ref_linear(ps, &b.ff.up, &h).mapv(crate::autodiff::gelu);
        let f = ref_linear(ps, &b.ff.down, &up);
        ln(&layer.norm2, &(&h + &f))
    }

    #[test]
    fn depth_zero_is_identity() {
        let (ps, s) = stack(0, 4, 1);
        let x = randn((5, 4), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(encode_multimodal(&ps, &s, &x, &[true; 5], 4).unwrap(), x);
    }

    #[test]
    fn depth_one_matches_reference_layer() {
        let (ps, s) = stack(1, 4, 3);
        let x = randn((5, 4), &mut ChaCha8Rng::seed_from_u64(4));
        let mask = [true, true, false, true, false];
        let got = encode_multimodal(&ps, &s, &x, &mask, 4).unwrap();
        let want = ref_encoder_layer(&ps, &s.layers[0], &x, &mask);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stack_errors() {
        let (ps, s) = stack(2, 4, 5);
        let x = Matrix::ones((3, 4));
        assert!(encode_multimodal(&ps, &s, &x, &[true; 2], 4).is_err());
        assert!(encode_multimodal(&ps, &s, &Matrix::ones((3, 5)), &[true; 3], 4).is_err());
        let y = encode_multimodal(&ps, &s, &x, &[true; 3], 4).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_projector_returns_constant_row() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = TokenProjector::new(&mut ps, 3, Pooling::Mean, &mut rng);
        p.mlp.activation = Activation::Identity;
        p.mlp.up.set_identity(&mut ps);
        p.mlp.down.set_identity(&mut ps);
        let c = array![[0.5, -1.5, 2.0]];
        let e = ndarray::concatenate(Axis(0), &[c.view(), c.view(), c.view(), c.view()]).unwrap();
        assert_eq!(project_token(&ps, &p, &e, &[true; 4]).unwrap(), c);
    }

    #[test]
    fn projector_matches_reference() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = TokenProjector::new(&mut ps, 4, Pooling::Mean, &mut rng);
        let e = randn((6, 4), &mut rng);
        let mask = [true, false, true, true, true, false];
        let mut mean = Array1::<f64>::zeros(4);
        for (row, &m) in e.rows().into_iter().zip(&mask) {
            if m {
                mean += &row;
            }
        }
        mean /= 4.0;
        let mean = mean.insert_axis(Axis(0));
        let h = ref_linear(&ps, &p.mlp.up, &mean).mapv(crate::autodiff::gelu);
        let want = ref_linear(&ps, &p.mlp.down, &h);
        let got = project_token(&ps, &p, &e, &mask).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ClassifierHead::new(&mut ps, 3, 20, 1e-5, &mut rng);
        head.linear.set_zero(&mut ps);
        let e = randn((4, 3), &mut rng);
        let t = randn((1, 3), &mut rng);
        let logits = classify(&ps, &head, &e, &t).unwrap();
        assert_eq!(logits.dim(), (1, 20));
        assert!(logits.iter().all(|&v| v == 0.0));
        assert!(classify(&ps, &head, &e, &randn((1, 4), &mut rng)).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (v, _) = cross_entropy_loss(Matrix::zeros((3, 7)).view(), &[0, 3, 6]).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-12);
        let (v, _) = cross_entropy_loss(array![[1000.0, 0.0, 0.0]].view(), &[0]).unwrap();
        assert!(v < 1e-12);
        assert!(cross_entropy_loss(array![[0.0, 0.0]].view(), &[2]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = randn((4, 5), &mut rng);
        let labels = [1, 0, 4, 2];
        let (v, g) = cross_entropy_loss(logits.view(), &labels).unwrap();
        let mut naive = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: f64 = logits.row(i).iter().map(|x| x.exp()).sum();
            naive += -(logits[[i, y]].exp() / z).ln();
        }
        assert!((v - naive / 4.0).abs() < 1e-6);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let plus = cross_entropy_loss(p.view(), &labels).unwrap().0;
                p[[i, j]] -= 2.0 * h;
                let minus = cross_entropy_loss(p.view(), &labels).unwrap().0;
                assert!((g[[i, j]] - (plus - minus) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.5, 1.25).unwrap(), 1.75);
        assert!(total_loss(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn label_counts_follow_the_bundled_label_sets() {
        let cfg = TrainConfig::toy();
        let mintrec = crate::semantic_sync::LabelDescriptionBank::bundled_mintrec();
        let m = AmessModel::new(&cfg, mintrec.labels.clone(), [32, 24, 16]).unwrap();
        assert_eq!(m.head.label_count, 20);
        let b2 = crate::semantic_sync::LabelDescriptionBank::bundled_mintrec2();
        let mut space = b2.labels.clone();
        space.push(b2.oos_label.clone().unwrap());
        let m = AmessModel::new(&cfg, space, [32, 24, 16]).unwrap();
        assert_eq!(m.head.label_count, 31);
    }

    #[test]
    fn tiny_model_fits_parameter_budget() {
        let m = AmessModel::new(&tiny_config(), vec!["L0".into(), "L1".into(), "L2".into()], [2, 2, 2]).unwrap();
        assert!(m.param_count() <= 500, "{}", m.param_count());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let m = AmessModel::new(&cfg, vec!["a".into(), "b".into()], [2, 3, 2]).unwrap();
        let path = dir.path().join("ck.json");
        m.save(&path).unwrap();
        let back = AmessModel::load(&path).unwrap();
        assert_eq!(back.params.to_flat(), m.params.to_flat());
        assert_eq!(back.config, m.config);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sample(&mut rng, [2, 3, 2], [3, 4, 5], 1);
        assert_eq!(back.logits(&s).unwrap(), m.logits(&s).unwrap());

        std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
        assert!(matches!(AmessModel::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn external_encoder_loads_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.model.encoder_depth = 1;
        cfg.model.encoder_ff_hidden = 2;
        let mut donor_cfg = cfg.clone();
        donor_cfg.seed = 99;
        let donor = AmessModel::new(&donor_cfg, vec!["a".into(), "b".into()], [2, 2, 2]).unwrap();
        let path = dir.path().join("enc.json");
        donor.save(&path).unwrap();
        cfg.model.encoder_kind = EncoderStackKind::External;
        cfg.model.encoder_weights = Some(path);
        let m = AmessModel::new(&cfg, vec!["a".into(), "b".into()], [2, 2, 2]).unwrap();
        for (id, name, v) in m.params.iter() {
            let d = donor.params.get(donor.params.id(name).unwrap());
            if name.starts_with("encoder.") {
                assert_eq!(v, d);
            } else if name.starts_with("ame.align") && name.ends_with(".weight") {
                assert_ne!(v, d, "{}", m.params.name(id));
            }
        }
    }

    #[test]
    fn total_loss_gradient_is_sum_of_parts_and_matches_finite_differences() {
        let cfg = tiny_config();
        let labels: Vec<String> = (0..3).map(|i| format!("L{i}")).collect();
        let model = AmessModel::new(&cfg, labels, [2, 2, 2]).unwrap();
        let bank = bank(3, 4);
        let idx = model.bank_indices(&bank).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<Sample> = (0..3).map(|l| random_sample(&mut rng, [2, 2, 2], [3, 4, 2], l)).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let (loss, grads) = model.loss_and_grad(&batch, &bank, &idx, None).unwrap();
        assert_eq!(loss.total, loss.triplet + loss.classification);

        let eval = |p: &[f64]| {
            let mut m = model.clone();
            m.params.set_flat(p);
            m.loss_and_grad(&batch, &bank, &idx, None).unwrap().0.total
        };
        let flat = model.params.to_flat();
        let analytic = grads.to_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let plus = eval(&p);
            p[i] -= 2.0 * h;
            let minus = eval(&p);
            let num = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(num.abs()).max(1e-4);
            worst = worst.max((analytic[i] - num).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn stack_preserves_shape(depth in 0usize..3, len in 1usize..6, seed in 0u64..1000) {
                let (ps, s) = stack(depth, 4, seed);
                let x = randn((len, 4), &mut ChaCha8Rng::seed_from_u64(seed));
                let y = encode_multimodal(&ps, &s, &x, &vec![true; len], 4).unwrap();
                prop_assert_eq!(y.dim(), (len, 4));
            }

            #[test]
            fn projector_is_permutation_invariant(seed in 0u64..1000, len in 2usize..7) {
                let mut ps = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = TokenProjector::new(&mut ps, 4, Pooling::Mean, &mut rng);
                let e = randn((len, 4), &mut rng);
                let mut perm: Vec<usize> = (0..len).collect();
                perm.rotate_left(1 + (seed as usize) % (len - 1));
                perm.swap(0, len - 1);
                let shuffled = e.select(Axis(0), &perm);
                let a = project_token(&ps, &p, &e, &vec![true; len]).unwrap();
                let b = project_token(&ps, &p, &shuffled, &vec![true; len]).unwrap();
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn cross_entropy_falls_as_true_logit_rises(seed in 0u64..1000, bump in 1e-3f64..5.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let logits = randn((1, 5), &mut rng);
                let y = (seed % 5) as usize;
                let (a, _) = cross_entropy_loss(logits.view(), &[y]).unwrap();
                let mut up = logits.clone();
                up[[0, y]] += bump;
                let (b, _) = cross_entropy_loss(up.view(), &[y]).unwrap();
                prop_assert!(b < a);
            }
        }
    }

    #[test]
    fn full_model_gradients_are_finite_across_seeds() {
        let mut cfg = TrainConfig::toy();
        cfg.model.d_t = 8;
        cfg.model.l_t = 6;
        cfg.model.k = 3;
        cfg.model.block_ff_hidden = 8;
        cfg.model.encoder_depth = 1;
        cfg.model.encoder_ff_hidden = 16;
        cfg.embedder.dim = 8;
        let bank = bank(3, 8);
        for seed in 0..100u64 {
            cfg.seed = seed;
            let model = AmessModel::new(&cfg, (0..3).map(|i| format!("L{i}")).collect(), [5, 4, 3]).unwrap();
            let idx = model.bank_indices(&bank).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<Sample> =
                (0..2).map(|l| random_sample(&mut rng, [5, 4, 3], [7, 9, 4], l)).collect();
            let batch: Vec<&Sample> = samples.iter().collect();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let (loss, grads) = model.loss_and_grad(&batch, &bank, &idx, Some(&mut drop_rng)).unwrap();
            assert!(loss.total.is_finite());
            assert!(grads.all_finite(), "seed {seed}");
        }
    }
}
