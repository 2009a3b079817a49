//! Dataset manifests, feature resolution, encoding into model samples and
//! the synthetic dataset generator.
//!
//! A manifest is JSON lines. The first line is a header, every other line a
//! sample:
//!
//! ```text
//! {"type":"header","split":"train","label_space":["Agree","Joke"],"oos_label":null}
//! {"type":"sample","id":"s0","text_tokens":[4,17,9],"video_feature_ref":"features/<sha>.jsonl#s0","audio_feature_ref":"features/<sha>.jsonl#s0","label":"Agree","scope":"in"}
//! ```
//!
//! Feature references are `<file relative to the manifest>#<record id>`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::config::TrainConfig;
use crate::encoders::{
    encode_audio, encode_text, encode_text_features, encode_video, read_feature_file, write_feature_file,
    FeatureRecord, Modality,
};
use crate::error::{Error, Result};
use crate::model_core::Sample;
use crate::semantic_sync::{DescriptionFile, LabelDescriptionBank, LabelEntry, DEFAULT_OOS_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub split: Split,
    pub label_space: Vec<String>,
    #[serde(default)]
    pub oos_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_feature_ref: Option<String>,
    pub video_feature_ref: String,
    pub audio_feature_ref: String,
    pub label: String,
    pub scope: Scope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ManifestLine {
    Header(ManifestHeader),
    Sample(ManifestRecord),
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// Directory feature references are resolved against.
    pub root: PathBuf,
    features: HashMap<String, FeatureRecord>,
}

impl DatasetManifest {
    pub fn split(&self) -> Split {
        self.header.split
    }

    pub fn label_space(&self) -> &[String] {
        &self.header.label_space
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Resolved feature matrix for a reference.
    pub fn feature(&self, reference: &str) -> Option<Matrix> {
        self.features.get(reference).map(FeatureRecord::to_matrix)
    }

    /// Per-class record counts in label-space order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.label_space.len()];
        for r in &self.records {
            if let Some(i) = self.header.label_space.iter().position(|l| *l == r.label) {
                counts[i] += 1;
            }
        }
        counts
    }
}

fn split_ref(reference: &str) -> Option<(&str, &str)> {
    let (file, id) = reference.rsplit_once('#')?;
    (!file.is_empty() && !id.is_empty()).then_some((file, id))
}

/// Check the header and records without touching feature files.
fn validate_records(header: &ManifestHeader, records: &[ManifestRecord]) -> Result<()> {
    let mut labels = HashSet::new();
    for l in &header.label_space {
        if !labels.insert(l.as_str()) {
            return Err(Error::invalid(format!("duplicate label `{l}` in label_space")));
        }
    }
    if header.label_space.len() < 2 {
        return Err(Error::invalid("label_space needs at least 2 labels"));
    }
    if let Some(oos) = &header.oos_label {
        if !labels.contains(oos.as_str()) {
            return Err(Error::invalid(format!("oos_label `{oos}` is not in label_space")));
        }
    }
    let mut ids = HashSet::new();
    for r in records {
        if r.id.is_empty() {
            return Err(Error::record("<empty>", "empty id"));
        }
        if !ids.insert(r.id.as_str()) {
            return Err(Error::record(&r.id, "duplicate id"));
        }
        if !labels.contains(r.label.as_str()) {
            return Err(Error::record(&r.id, format!("unknown label `{}`", r.label)));
        }
        let is_oos = header.oos_label.as_deref() == Some(r.label.as_str());
        if is_oos != (r.scope == Scope::Out) {
            return Err(Error::record(
                &r.id,
                format!("scope {:?} does not match label `{}`", r.scope, r.label),
            ));
        }
        match (&r.text_tokens, &r.text_feature_ref) {
            (Some(t), None) if !t.is_empty() => {}
            (Some(_), None) => return Err(Error::record(&r.id, "text_tokens is empty")),
            _ => {
                if r.text_feature_ref.is_none() || r.text_tokens.is_some() {
                    return Err(Error::record(
                        &r.id,
                        "exactly one of text_tokens and text_feature_ref is required",
                    ));
                }
            }
        }
        for reference in r.feature_refs() {
            if split_ref(reference).is_none() {
                return Err(Error::record(&r.id, format!("malformed feature ref `{reference}`")));
            }
        }
    }
    Ok(())
}

impl ManifestRecord {
    fn feature_refs(&self) -> impl Iterator<Item = &str> {
        self.text_feature_ref
            .as_deref()
            .into_iter()
            .chain([self.video_feature_ref.as_str(), self.audio_feature_ref.as_str()])
    }
}

/// Parse and validate a manifest, resolving every feature reference.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        match parsed {
            ManifestLine::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
            ManifestLine::Header(_) => {
                return Err(Error::invalid(format!(
                    "{}:{}: header must be the first and only header line",
                    path.display(),
                    lineno + 1
                )))
            }
            ManifestLine::Sample(_) if header.is_none() => {
                return Err(Error::invalid(format!("{}: missing header line", path.display())))
            }
            ManifestLine::Sample(r) => records.push(r),
        }
    }
    let header = header.ok_or_else(|| Error::invalid(format!("{}: empty manifest", path.display())))?;
    validate_records(&header, &records)?;

    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut files: HashMap<String, HashMap<String, Vec<FeatureRecord>>> = HashMap::new();
    let mut features = HashMap::new();
    for r in &records {
        let wanted = [
            r.text_feature_ref.as_deref().map(|x| (x, Modality::Text)),
            Some((r.video_feature_ref.as_str(), Modality::Video)),
            Some((r.audio_feature_ref.as_str(), Modality::Audio)),
        ];
        for (reference, modality) in wanted.into_iter().flatten() {
            let (file, id) = split_ref(reference).expect("validated");
            if !files.contains_key(file) {
                let fpath = root.join(file);
                if !fpath.is_file() {
                    return Err(Error::record(&r.id, format!("dangling feature ref `{reference}`")));
                }
                let mut by_id: HashMap<String, Vec<FeatureRecord>> = HashMap::new();
                for rec in read_feature_file(&fpath)? {
                    by_id.entry(rec.id.clone()).or_default().push(rec);
                }
                files.insert(file.to_string(), by_id);
            }
            let rec = files[file]
                .get(id)
                .and_then(|v| v.iter().find(|f| f.modality == modality))
                .ok_or_else(|| {
                    Error::record(
                        &r.id,
                        format!("dangling feature ref `{reference}` ({} record not found)", modality.as_str()),
                    )
                })?;
            features.insert(reference.to_string(), rec.clone());
        }
    }
    Ok(DatasetManifest {
        header,
        records,
        root,
        features,
    })
}

/// Write a manifest file. Records are validated first.
pub fn write_manifest(path: &Path, header: &ManifestHeader, records: &[ManifestRecord]) -> Result<()> {
    validate_records(header, records)?;
    let mut body = serde_json::to_string(&ManifestLine::Header(header.clone())).expect("serializes");
    body.push('\n');
    for r in records {
        body.push_str(&serde_json::to_string(&ManifestLine::Sample(r.clone())).expect("serializes"));
        body.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Encoded samples of one split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub label_space: Vec<String>,
    pub oos_label: Option<String>,
    pub samples: Vec<Sample>,
    /// Encoder output widths `[text, video, audio]`.
    pub input_dims: [usize; 3],
}

impl Dataset {
    pub fn oos_index(&self) -> Option<usize> {
        let oos = self.oos_label.as_ref()?;
        self.label_space.iter().position(|l| l == oos)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Run every record through the configured frozen encoders.
/// Sequences are capped at the smaller of each encoder's `max_length` and
/// the model's `l_t`/`l_v`/`l_a`.
pub fn encode_manifest(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Dataset> {
    let mut enc = config.encoders.clone();
    let m = &config.model;
    enc.text.max_length = enc.text.max_length.min(m.l_t);
    enc.video.max_length = enc.video.max_length.min(m.l_v);
    enc.audio.max_length = enc.audio.max_length.min(m.l_a);
    let feature = |r: &ManifestRecord, reference: &str| {
        manifest
            .feature(reference)
            .ok_or_else(|| Error::record(&r.id, format!("dangling feature ref `{reference}`")))
    };
    let mut samples = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let text = match (&r.text_tokens, &r.text_feature_ref) {
            (Some(tokens), _) => encode_text(tokens, &enc.text),
            (None, Some(reference)) => encode_text_features(feature(r, reference)?.view(), &enc.text),
            (None, None) => unreachable!("validated"),
        }
        .map_err(|e| Error::record(&r.id, e.to_string()))?;
        let video = encode_video(feature(r, &r.video_feature_ref)?.view(), &enc.video)
            .map_err(|e| Error::record(&r.id, e.to_string()))?;
        let audio = encode_audio(feature(r, &r.audio_feature_ref)?.view(), &enc.audio)
            .map_err(|e| Error::record(&r.id, e.to_string()))?;
        let label = manifest
            .header
            .label_space
            .iter()
            .position(|l| *l == r.label)
            .expect("validated");
        samples.push(Sample {
            id: r.id.clone(),
            text,
            video,
            audio,
            label,
        });
    }
    Ok(Dataset {
        split: manifest.split(),
        label_space: manifest.header.label_space.clone(),
        oos_label: manifest.header.oos_label.clone(),
        samples,
        input_dims: [enc.text.output_dim, enc.video.output_dim, enc.audio.output_dim],
    })
}

pub fn load_dataset(path: &Path, config: &TrainConfig) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    if manifest.is_empty() {
        return Err(Error::invalid(format!("{}: manifest has no samples", path.display())));
    }
    encode_manifest(&manifest, config)
}

/// Separable clusters with integer-token text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Class names; defaults to bundled label names.
    pub labels: Option<Vec<String>>,
    /// Width of the raw video and audio features.
    pub feature_dim: usize,
    /// Maximum text tokens, video frames and audio frames per sample.
    pub text_len: usize,
    pub video_len: usize,
    pub audio_len: usize,
    /// Distance between any two class centers.
    pub margin: f64,
    /// Per-entry noise standard deviation.
    pub noise: f64,
    pub oos_fraction: f64,
    pub descriptions_per_label: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Label order for generated data; the first four are the ones the PCA
/// report looks at.
const PREFERRED_LABELS: [&str; 4] = ["Agree", "Joke", "Criticize", "Oppose"];

/// Token ids below this are shared by every class.
const SHARED_VOCAB: u32 = 64;
const CLASS_VOCAB: u32 = 32;

impl SyntheticSpec {
    /// The separable preset: 4 classes, margin 10, 200 train / 50 val / 50 test.
    pub fn bundled() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_test: 50,
            n_classes: 4,
            labels: None,
            feature_dim: 16,
            text_len: 16,
            video_len: 32,
            audio_len: 48,
            margin: 10.0,
            noise: 1.0,
            oos_fraction: 0.0,
            descriptions_per_label: 3,
            seed: 1234,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(0.0..1.0).contains(&self.oos_fraction) {
            return bad(format!("oos_fraction must be in [0, 1), got {}", self.oos_fraction));
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if self.n_classes > self.feature_dim {
            return bad(format!(
                "n_classes ({}) cannot exceed feature_dim ({})",
                self.n_classes, self.feature_dim
            ));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if self.text_len == 0 || self.video_len == 0 || self.audio_len == 0 {
            return bad("sequence lengths must be positive".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        if self.descriptions_per_label < 2 {
            return bad("descriptions_per_label must be at least 2".into());
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n_classes {
                return bad(format!("{} labels given for {} classes", l.len(), self.n_classes));
            }
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        if let Some(l) = &self.labels {
            return l.clone();
        }
        let bank = LabelDescriptionBank::bundled_mintrec();
        let mut names: Vec<String> = PREFERRED_LABELS.iter().map(|s| s.to_string()).collect();
        names.extend(bank.labels.iter().filter(|l| !PREFERRED_LABELS.contains(&l.as_str())).cloned());
        let mut i = 0;
        while names.len() < self.n_classes {
            names.push(format!("Class{i}"));
            i += 1;
        }
        names.truncate(self.n_classes);
        names
    }

    fn oos_count(&self, n: usize) -> usize {
        (n as f64 * self.oos_fraction).round() as usize
    }
}

/// Paths written by [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct SyntheticOutput {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub descriptions: PathBuf,
}

/// Class index per sample, balanced within one; `None` marks out of scope.
fn balanced_labels(n: usize, classes: usize, oos: usize, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    let mut labels: Vec<Option<usize>> = (0..n - oos).map(|i| Some(i % classes)).collect();
    labels.extend(std::iter::repeat(None).take(oos));
    labels.shuffle(rng);
    labels
}

fn class_center(spec: &SyntheticSpec, class: Option<usize>) -> Vec<f64> {
    let d = spec.feature_dim;
    match class {
        Some(c) => {
            let mut v = vec![0.0; d];
            v[c] = spec.margin / 2f64.sqrt();
            v
        }
        // Opposite side of the origin from every class center.
        None => vec![-spec.margin / (d as f64).sqrt(); d],
    }
}

fn frames(center: &[f64], len: usize, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((len, center.len()), |(_, j)| center[j] + noise.sample(rng))
}

fn tokens(spec: &SyntheticSpec, class: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let len = rng.gen_range(spec.text_len.div_ceil(2)..=spec.text_len);
    let base = SHARED_VOCAB + CLASS_VOCAB * class.map_or(spec.n_classes as u32, |c| c as u32);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.7) {
                base + rng.gen_range(0..CLASS_VOCAB)
            } else {
                rng.gen_range(0..SHARED_VOCAB)
            }
        })
        .collect()
}

/// Descriptions for generated labels: bundled texts first, then numbered
/// paraphrases.
pub fn synthetic_descriptions(names: &[String], m: usize, oos: bool) -> DescriptionFile {
    let bundled = LabelDescriptionBank::bundled_mintrec();
    let labels = names
        .iter()
        .map(|name| {
            let mut d: Vec<String> = bundled
                .index_of(name)
                .map(|i| bundled.descriptions[i].clone())
                .unwrap_or_default();
            d.truncate(m);
            let mut j = d.len();
            while d.len() < m {
                j += 1;
                d.push(format!("{name}: paraphrase {j} of the intent."));
            }
            LabelEntry {
                name: name.clone(),
                descriptions: d,
            }
        })
        .collect();
    DescriptionFile {
        prompt_template: bundled.prompt_template.clone(),
        labels,
        oos_label: oos.then(|| DEFAULT_OOS_LABEL.to_string()),
    }
}

/// Write `train.jsonl`, `val.jsonl`, `test.jsonl`, `descriptions.json` and
/// the feature files under `dir`. Output is a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticOutput> {
    spec.validate()?;
    let names = spec.label_names();
    let with_oos = spec.oos_fraction > 0.0;
    let mut label_space = names.clone();
    if with_oos {
        label_space.push(DEFAULT_OOS_LABEL.to_string());
    }
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let feat_dir = dir.join("features");
    let mut paths = Vec::new();
    for (idx, (split, n)) in [(Split::Train, spec.n_train), (Split::Val, spec.n_val), (Split::Test, spec.n_test)]
        .into_iter()
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64 + 1);
        let classes = balanced_labels(n, spec.n_classes, spec.oos_count(n), &mut rng);
        let mut video = Vec::with_capacity(n);
        let mut audio = Vec::with_capacity(n);
        let mut drafts = Vec::with_capacity(n);
        for (i, class) in classes.iter().enumerate() {
            let id = format!("{}-{i:05}", split.as_str());
            let center = class_center(spec, *class);
            let lv = rng.gen_range(spec.video_len.div_ceil(2)..=spec.video_len);
            let la = rng.gen_range(spec.audio_len.div_ceil(2)..=spec.audio_len);
            let text = tokens(spec, *class, &mut rng);
            video.push(FeatureRecord::from_matrix(&id, Modality::Video, &frames(&center, lv, &noise, &mut rng)));
            audio.push(FeatureRecord::from_matrix(&id, Modality::Audio, &frames(&center, la, &noise, &mut rng)));
            drafts.push((id, text, *class));
        }
        let vfile = write_feature_file(&feat_dir, &video)?;
        let afile = write_feature_file(&feat_dir, &audio)?;
        let records: Vec<ManifestRecord> = drafts
            .into_iter()
            .map(|(id, text, class)| ManifestRecord {
                text_tokens: Some(text),
                text_feature_ref: None,
                video_feature_ref: format!("features/{vfile}#{id}"),
                audio_feature_ref: format!("features/{afile}#{id}"),
                label: class.map_or(DEFAULT_OOS_LABEL.to_string(), |c| names[c].clone()),
                scope: if class.is_some() { Scope::In } else { Scope::Out },
                id,
            })
            .collect();
        let header = ManifestHeader {
            split,
            label_space: label_space.clone(),
            oos_label: with_oos.then(|| DEFAULT_OOS_LABEL.to_string()),
        };
        let path = dir.join(format!("{}.jsonl", split.as_str()));
        write_manifest(&path, &header, &records)?;
        paths.push(path);
    }
    let descriptions = dir.join("descriptions.json");
    let file = synthetic_descriptions(&names, spec.descriptions_per_label, with_oos);
    LabelDescriptionBank::from_file(file.clone())?;
    let text = serde_json::to_string_pretty(&file).expect("serializes");
    fs::write(&descriptions, text).map_err(|e| Error::io(&descriptions, e))?;
    let mut it = paths.into_iter();
    Ok(SyntheticOutput {
        train: it.next().expect("three splits"),
        val: it.next().expect("three splits"),
        test: it.next().expect("three splits"),
        descriptions,
    })
}
