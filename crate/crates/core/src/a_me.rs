//! Anchor-based multimodal embedding.
//!
//! Pipeline per sample:
//!
//! 1. align text, video and audio to `(l_t × d_t)`;
//! 2. fuse each auxiliary stream into the text positions with a text-query
//!    cross-attention;
//! 3. score every position by the ratio between its first and second nearest
//!    cosine neighbour and keep the top-k fused tokens as anchors;
//! 4. let the video and audio anchors attend to each other (residual);
//! 5. restore each stream to full length by attending from the fused
//!    sequence to its enhanced anchors;
//! 6. sum the two streams, layer-normalize and apply dropout.

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::encoders::{align_graph, Modality, ModalityEmbedding};
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear};

/// Guard used in cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-12;

/// An auxiliary stream after text-query fusion, `(l_t × d_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub data: Matrix,
    /// Validity of each text position the stream was fused into.
    pub mask: Vec<bool>,
    pub source_modality: Modality,
}

/// `k` selected tokens with their positions and reliability scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub vectors: Matrix,
    pub indices: Vec<usize>,
    /// Non-increasing.
    pub scores: Vec<f64>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorDirection {
    /// Video anchors enhanced with audio information.
    AudioToVideo,
    /// Audio anchors enhanced with video information.
    VideoToAudio,
}

/// Query/key/value projections plus a feedforward.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ff: FeedForward,
    pub heads: usize,
}

impl CrossAttentionBlock {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "heads must divide d_model");
        Self {
            query: Linear::new(params, &format!("{name}.query"), d_model, d_model, false, rng),
            key: Linear::new(params, &format!("{name}.key"), d_model, d_model, false, rng),
            value: Linear::new(params, &format!("{name}.value"), d_model, d_model, false, rng),
            ff: FeedForward::new(params, &format!("{name}.ff"), d_model, ff_hidden, rng),
            heads,
        }
    }

    pub fn d_model(&self, params: &ParamStore) -> usize {
        self.query.dims(params).0
    }

    /// Set the three projections to the identity map.
    pub fn set_identity_projections(&self, params: &mut ParamStore) {
        self.query.set_identity(params);
        self.key.set_identity(params);
        self.value.set_identity(params);
    }

    /// Scaled dot-product attention `softmax(Q Kᵀ / √d_h) V`, heads
    /// concatenated. Returns the output and each head's weight matrix.
    pub fn attend(
        &self,
        g: &mut Graph,
        query: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let d = g.shape(q).1;
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let (a, b) = (h * head_dim, (h + 1) * head_dim);
                (g.slice_cols(q, a, b), g.slice_cols(k, a, b), g.slice_cols(v, a, b))
            };
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, scale);
            let w = g.softmax_rows(logits, key_mask);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        (out, weights)
    }

    /// `A + FF(A)` with `A` the attention output.
    fn attend_and_refine(
        &self,
        g: &mut Graph,
        query: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let (a, _) = self.attend(g, query, keys, key_mask);
        let f = self.ff.forward(g, a);
        g.add(a, f)
    }
}

/// Text-query fusion: text is the query, the aligned auxiliary stream is key
/// and value. Masked auxiliary rows are never attended.
pub fn fuse_with_text_graph(
    g: &mut Graph,
    block: &CrossAttentionBlock,
    aux: Var,
    aux_mask: &[bool],
    text: Var,
) -> Result<Var> {
    if g.shape(aux) != g.shape(text) {
        return Err(Error::shape(
            "fuse_with_text",
            format!("{:?}", g.shape(text)),
            format!("{:?}", g.shape(aux)),
        ));
    }
    if aux_mask.len() != g.shape(aux).0 {
        return Err(Error::shape("fuse_with_text mask", g.shape(aux).0, aux_mask.len()));
    }
    if !aux_mask.iter().any(|&m| m) {
        return Err(Error::invalid("no attendable keys: auxiliary mask is all false"));
    }
    Ok(block.attend_and_refine(g, text, aux, Some(aux_mask)))
}

/// Value-level [`fuse_with_text_graph`]. `aux` must already be aligned.
pub fn fuse_with_text(
    params: &ParamStore,
    block: &CrossAttentionBlock,
    aux: &ModalityEmbedding,
    text: &ModalityEmbedding,
) -> Result<FusedEmbedding> {
    let mut g = Graph::new(params);
    let a = g.constant(aux.data.clone());
    let t = g.constant(text.data.clone());
    let out = fuse_with_text_graph(&mut g, block, a, &aux.mask, t)?;
    Ok(FusedEmbedding {
        data: g.value(out).clone(),
        mask: text.mask.clone(),
        source_modality: aux.modality,
    })
}

/// Guarded cosine similarity; zero-norm vectors have similarity 0.
pub fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let denom = (a.dot(&a).sqrt() * b.dot(&b).sqrt()).max(COSINE_EPS);
    a.dot(&b) / denom
}

/// First-to-second nearest similarity ratio with a guarded denominator.
pub fn reliability_ratio(first: f64, second: f64) -> f64 {
    let denom = if second.abs() < COSINE_EPS {
        COSINE_EPS
    } else {
        second
    };
    first / denom
}

/// Rank positions by reliability and return the top `k` as
/// `(indices, scores)`.
///
/// Each valid text row is compared by cosine similarity with every valid
/// fused row; its score is the ratio of the largest to the second largest
/// similarity. The fused rows at the `k` best-scoring positions become the
/// anchors. Positions invalid in either mask are never selected, and `k` is
/// capped at the number of valid positions. Equal scores go to the lower
/// index.
pub fn anchor_ranking(
    text: ArrayView2<f64>,
    fused: ArrayView2<f64>,
    mask: &[bool],
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if text.dim() != fused.dim() {
        return Err(Error::shape(
            "select_anchors",
            format!("{:?}", text.dim()),
            format!("{:?}", fused.dim()),
        ));
    }
    let len = text.nrows();
    if mask.len() != len {
        return Err(Error::shape("select_anchors mask", len, mask.len()));
    }
    if len < 2 {
        return Err(Error::invalid(
            "anchor selection needs at least 2 tokens (second nearest neighbour)",
        ));
    }
    if k == 0 || k > len {
        return Err(Error::invalid(format!("anchor count k = {k} outside [1, {len}]")));
    }
    let valid: Vec<usize> = (0..len).filter(|&i| mask[i]).collect();
    if valid.len() < 2 {
        return Err(Error::invalid(format!(
            "anchor selection needs at least 2 valid tokens, found {}",
            valid.len()
        )));
    }

    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(valid.len());
    let mut sims = Vec::with_capacity(valid.len());
    for &i in &valid {
        sims.clear();
        for &j in &valid {
            sims.push(cosine(text.row(i), fused.row(j)).clamp(-1.0, 1.0));
        }
        sims.sort_by(|a, b| b.total_cmp(a));
        scored.push((i, reliability_ratio(sims[0], sims[1])));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k.min(valid.len()));
    Ok(scored.into_iter().unzip())
}

/// Value-level anchor selection over a fused stream.
pub fn select_anchors(
    text: &ModalityEmbedding,
    fused: &FusedEmbedding,
    k: usize,
) -> Result<AnchorSet> {
    let mask: Vec<bool> = text
        .mask
        .iter()
        .zip(&fused.mask)
        .map(|(a, b)| *a && *b)
        .collect();
    let (indices, scores) = anchor_ranking(text.data.view(), fused.data.view(), &mask, k)?;
    Ok(AnchorSet {
        vectors: fused.data.select(ndarray::Axis(0), &indices),
        indices,
        scores,
    })
}

/// `target + FF(softmax(Q_t K_sᵀ / √d) V_s)`.
pub fn anchor_cross_attention_graph(
    g: &mut Graph,
    block: &CrossAttentionBlock,
    target: Var,
    source: Var,
) -> Result<Var> {
    if g.shape(target) != g.shape(source) {
        return Err(Error::shape(
            "anchor_cross_attention",
            format!("{:?}", g.shape(target)),
            format!("{:?}", g.shape(source)),
        ));
    }
    let (a, _) = block.attend(g, target, source, None);
    let f = block.ff.forward(g, a);
    Ok(g.add(target, f))
}

/// Value-level anchor interaction; indices and scores of `target` carry over.
pub fn anchor_cross_attention(
    params: &ParamStore,
    block: &CrossAttentionBlock,
    target: &AnchorSet,
    source: &AnchorSet,
) -> Result<AnchorSet> {
    let mut g = Graph::new(params);
    let t = g.constant(target.vectors.clone());
    let s = g.constant(source.vectors.clone());
    let out = anchor_cross_attention_graph(&mut g, block, t, s)?;
    Ok(AnchorSet {
        vectors: g.value(out).clone(),
        indices: target.indices.clone(),
        scores: target.scores.clone(),
    })
}

/// Fused sequence queries its enhanced anchors: `A + FF(A)`.
pub fn temporal_cross_attention_graph(
    g: &mut Graph,
    block: &CrossAttentionBlock,
    fused: Var,
    anchors: Var,
) -> Result<Var> {
    let (k, d) = g.shape(anchors);
    if k == 0 {
        return Err(Error::invalid("temporal cross-attention needs at least one anchor"));
    }
    if d != g.shape(fused).1 {
        return Err(Error::shape("temporal_cross_attention dim", g.shape(fused).1, d));
    }
    Ok(block.attend_and_refine(g, fused, anchors, None))
}

pub fn temporal_cross_attention(
    params: &ParamStore,
    block: &CrossAttentionBlock,
    fused: &FusedEmbedding,
    anchors: &AnchorSet,
) -> Result<Matrix> {
    if anchors.is_empty() {
        return Err(Error::invalid("temporal cross-attention needs at least one anchor"));
    }
    let mut g = Graph::new(params);
    let f = g.constant(fused.data.clone());
    let a = g.constant(anchors.vectors.clone());
    let out = temporal_cross_attention_graph(&mut g, block, f, a)?;
    Ok(g.value(out).clone())
}

/// Inverted-dropout keep mask scaled by `1 / (1 - rate)`.
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Matrix {
    let keep = 1.0 - rate;
    Matrix::from_shape_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

/// `Dropout(LayerNorm(e_vm + e_am))`; dropout only when an RNG is supplied.
pub fn combine_graph(
    g: &mut Graph,
    norm: &LayerNorm,
    e_vm: Var,
    e_am: Var,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if g.shape(e_vm) != g.shape(e_am) {
        return Err(Error::shape(
            "combine",
            format!("{:?}", g.shape(e_vm)),
            format!("{:?}", g.shape(e_am)),
        ));
    }
    let sum = g.add(e_vm, e_am);
    let normed = norm.forward(g, sum);
    Ok(match rng {
        Some(rng) if dropout > 0.0 => {
            let mask = dropout_mask(g.shape(normed), dropout, rng);
            g.mul_const(normed, mask)
        }
        _ => normed,
    })
}

pub fn combine(
    params: &ParamStore,
    norm: &LayerNorm,
    e_vm: &Matrix,
    e_am: &Matrix,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Matrix> {
    let mut g = Graph::new(params);
    let v = g.constant(e_vm.clone());
    let a = g.constant(e_am.clone());
    let out = combine_graph(&mut g, norm, v, a, dropout, rng)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmeConfig {
    pub l_t: usize,
    pub d_t: usize,
    pub k: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

/// Learnable parts of the module.
#[derive(Clone, Debug)]
pub struct AnchorEmbedding {
    pub config: AmeConfig,
    pub align_text: Linear,
    pub align_video: Linear,
    pub align_audio: Linear,
    pub fuse_video: CrossAttentionBlock,
    pub fuse_audio: CrossAttentionBlock,
    /// Enhances video anchors with audio anchors.
    pub anchor_audio_to_video: CrossAttentionBlock,
    /// Enhances audio anchors with video anchors.
    pub anchor_video_to_audio: CrossAttentionBlock,
    pub temporal_video: CrossAttentionBlock,
    pub temporal_audio: CrossAttentionBlock,
    pub norm: LayerNorm,
}

/// Everything a forward pass produced, for inspection.
pub struct AmeTrace {
    pub e_m: Var,
    pub text: Var,
    pub text_mask: Vec<bool>,
    pub video_anchor_indices: Vec<usize>,
    pub audio_anchor_indices: Vec<usize>,
}

impl AnchorEmbedding {
    /// Input widths are those of the encoders feeding the module.
    pub fn new(
        params: &mut ParamStore,
        config: AmeConfig,
        input_dims: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.d_t;
        let [dt, dv, da] = input_dims;
        let (h, ff) = (config.heads, config.ff_hidden);
        Self {
            align_text: Linear::new(params, "ame.align.text", dt, d, true, rng),
            align_video: Linear::new(params, "ame.align.video", dv, d, true, rng),
            align_audio: Linear::new(params, "ame.align.audio", da, d, true, rng),
            fuse_video: CrossAttentionBlock::new(params, "ame.fuse.video", d, h, ff, rng),
            fuse_audio: CrossAttentionBlock::new(params, "ame.fuse.audio", d, h, ff, rng),
            anchor_audio_to_video: CrossAttentionBlock::new(params, "ame.anchor.a2v", d, h, ff, rng),
            anchor_video_to_audio: CrossAttentionBlock::new(params, "ame.anchor.v2a", d, h, ff, rng),
            temporal_video: CrossAttentionBlock::new(params, "ame.temporal.video", d, h, ff, rng),
            temporal_audio: CrossAttentionBlock::new(params, "ame.temporal.audio", d, h, ff, rng),
            norm: LayerNorm::new(params, "ame.norm", d, config.layer_norm_eps),
            config,
        }
    }

    pub fn anchor_block(&self, direction: AnchorDirection) -> &CrossAttentionBlock {
        match direction {
            AnchorDirection::AudioToVideo => &self.anchor_audio_to_video,
            AnchorDirection::VideoToAudio => &self.anchor_video_to_audio,
        }
    }

    pub fn blocks(&self) -> [&CrossAttentionBlock; 6] {
        [
            &self.fuse_video,
            &self.fuse_audio,
            &self.anchor_audio_to_video,
            &self.anchor_video_to_audio,
            &self.temporal_video,
            &self.temporal_audio,
        ]
    }

    /// Records the full pipeline on `g`. Pass an RNG to enable dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        text: &ModalityEmbedding,
        video: &ModalityEmbedding,
        audio: &ModalityEmbedding,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<AmeTrace> {
        let l_t = self.config.l_t;
        let (t, text_mask) = align_graph(g, text, l_t, &self.align_text)?;
        let (v, video_mask) = align_graph(g, video, l_t, &self.align_video)?;
        let (a, audio_mask) = align_graph(g, audio, l_t, &self.align_audio)?;

        let v_fused = fuse_with_text_graph(g, &self.fuse_video, v, &video_mask, t)?;
        let a_fused = fuse_with_text_graph(g, &self.fuse_audio, a, &audio_mask, t)?;

        let (v_idx, _) = anchor_ranking(
            g.value(t).view(),
            g.value(v_fused).view(),
            &text_mask,
            self.config.k,
        )?;
        let (a_idx, _) = anchor_ranking(
            g.value(t).view(),
            g.value(a_fused).view(),
            &text_mask,
            self.config.k,
        )?;
        let v_anchor = g.gather_rows(v_fused, &v_idx);
        let a_anchor = g.gather_rows(a_fused, &a_idx);

        let v_enh = anchor_cross_attention_graph(g, &self.anchor_audio_to_video, v_anchor, a_anchor)?;
        let a_enh = anchor_cross_attention_graph(g, &self.anchor_video_to_audio, a_anchor, v_anchor)?;

        let e_vm = temporal_cross_attention_graph(g, &self.temporal_video, v_fused, v_enh)?;
        let e_am = temporal_cross_attention_graph(g, &self.temporal_audio, a_fused, a_enh)?;

        let e_m = combine_graph(g, &self.norm, e_vm, e_am, self.config.dropout, rng)?;
        Ok(AmeTrace {
            e_m,
            text: t,
            text_mask,
            video_anchor_indices: v_idx,
            audio_anchor_indices: a_idx,
        })
    }

    /// Eval-mode forward returning `E_m`.
    pub fn forward(
        &self,
        params: &ParamStore,
        text: &ModalityEmbedding,
        video: &ModalityEmbedding,
        audio: &ModalityEmbedding,
    ) -> Result<Matrix> {
        let mut g = Graph::new(params);
        let trace = self.forward_graph(&mut g, text, video, audio, None)?;
        Ok(g.value(trace.e_m).clone())
    }

    pub fn forward_batch(
        &self,
        params: &ParamStore,
        batch: &[(ModalityEmbedding, ModalityEmbedding, ModalityEmbedding)],
    ) -> Result<Vec<Matrix>> {
        batch
            .iter()
            .map(|(t, v, a)| self.forward(params, t, v, a))
            .collect()
    }
}
