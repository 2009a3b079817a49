//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use amess::a_me::{
    anchor_cross_attention, anchor_ranking, combine, select_anchors, AmeConfig, AnchorEmbedding, AnchorSet,
    CrossAttentionBlock, FusedEmbedding,
};
use amess::cli_data::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use amess::config::NegativesMode;
use amess::encoders::{Modality, ModalityEmbedding};
use amess::layers::LayerNorm;
use amess::model_core::{AmessModel, Sample};
use amess::semantic_sync::{
    embed_descriptions, load_descriptions, triplet_contrastive_loss, DescriptionEmbedderSpec, DescriptionFile,
    LabelDescriptionBank, LabelEntry, TripletOptions,
};
use amess::train_eval::{
    anchor_sweep, description_count_sweep, evaluate, prepare_bank, train, write_sweep_csv, MetricsReport, SweepData,
};
use amess::{Graph, Matrix, ParamStore, TrainConfig};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

fn unit_rows(mut m: Matrix) -> Matrix {
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("anchor selection matches brute force", anchor_oracle),
        ("triplet loss matches reference", triplet_reference),
        ("gradients match finite differences", finite_differences),
        ("scale invariance", scale_invariance),
        ("synthetic convergence and determinism", convergence),
        ("anchor and description sweeps", sweeps),
        ("metrics", metrics),
        ("residual identities", residual_identities),
        ("bundled description banks", bundled_banks),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1

fn brute_force_ranking(text: &Matrix, fused: &Matrix, mask: &[bool], k: usize) -> (Vec<usize>, Vec<f64>) {
    let cos = |i: usize, j: usize| {
        let (mut dot, mut nt, mut nf) = (0.0, 0.0, 0.0);
        for c in 0..text.ncols() {
            dot += text[[i, c]] * fused[[j, c]];
            nt += text[[i, c]] * text[[i, c]];
            nf += fused[[j, c]] * fused[[j, c]];
        }
        let den = nt.sqrt() * nf.sqrt();
        if den < 1e-12 {
            0.0
        } else {
            (dot / den).clamp(-1.0, 1.0)
        }
    };
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut scores = vec![f64::NAN; mask.len()];
    for &i in &valid {
        let mut sims: Vec<f64> = valid.iter().map(|&j| cos(i, j)).collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let second = if sims[1].abs() < 1e-12 { 1e-12 } else { sims[1] };
        scores[i] = sims[0] / second;
    }
    // Try every position for each slot: best score, then lowest index.
    let mut taken = vec![false; mask.len()];
    let mut out = (Vec::new(), Vec::new());
    for _ in 0..k.min(valid.len()) {
        let mut pick: Option<usize> = None;
        for &i in &valid {
            if taken[i] {
                continue;
            }
            if pick.map_or(true, |p| scores[i] > scores[p]) {
                pick = Some(i);
            }
        }
        let p = pick.unwrap();
        taken[p] = true;
        out.0.push(p);
        out.1.push(scores[p]);
    }
    out
}

fn anchor_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = rng.gen_range(2..=12);
        let d = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=l);
        let text = randn((l, d), &mut rng);
        let fused = randn((l, d), &mut rng);
        let mut mask: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.8)).collect();
        mask[0] = true;
        mask[l - 1] = true;
        let (want_idx, want_sc) = brute_force_ranking(&text, &fused, &mask, k);

        let t = ok(ModalityEmbedding::new(text.clone(), mask.clone(), Modality::Text))?;
        let f = FusedEmbedding {
            data: fused.clone(),
            mask: mask.clone(),
            source_modality: Modality::Video,
        };
        let got = ok(select_anchors(&t, &f, k))?;
        ensure!(got.indices == want_idx, "seed {seed}: indices {:?} vs oracle {:?}", got.indices, want_idx);
        for (a, b) in got.scores.iter().zip(&want_sc) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        for (row, &i) in got.indices.iter().enumerate() {
            ensure!(got.vectors.row(row) == fused.row(i), "seed {seed}: anchor row {row} not gathered from {i}");
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst < 1e-12, "score mismatch {worst:e}");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("100 instances, index match exact, worst score error {worst:.1e}, {:.3}s", elapsed.as_secs_f64()))
}

// 2

fn random_bank(labels: usize, m: usize, d: usize, oos: bool, rng: &mut ChaCha8Rng) -> LabelDescriptionBank {
    let file = DescriptionFile {
        prompt_template: String::new(),
        labels: (0..labels)
            .map(|l| LabelEntry {
                name: format!("L{l}"),
                descriptions: (0..m).map(|j| format!("label {l} text {j}")).collect(),
            })
            .collect(),
        oos_label: oos.then(|| "UNKNOWN".to_string()),
    };
    let mut bank = LabelDescriptionBank::from_file(file).expect("valid bank");
    bank.embeddings = Some((0..labels).map(|_| unit_rows(randn((m, d), rng))).collect());
    bank
}

fn reference_triplet(tokens: &Matrix, labels: &[Option<usize>], bank: &Matrix3, opts: &TripletOptions) -> f64 {
    let cos = |t: ndarray::ArrayView1<f64>, s: ndarray::ArrayView1<f64>| {
        let mut dot = 0.0;
        let mut nt = 0.0;
        let mut ns = 0.0;
        for c in 0..t.len() {
            dot += t[c] * s[c];
            nt += t[c] * t[c];
            ns += s[c] * s[c];
        }
        dot / (nt.sqrt() * ns.sqrt()).max(1e-12)
    };
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..tokens.nrows() {
        let Some(p) = labels[i] else { continue };
        let mut neg_labels = Vec::new();
        match opts.negatives {
            NegativesMode::Label => {
                for k in 0..bank.len() {
                    if k != p {
                        neg_labels.push(k);
                    }
                }
            }
            NegativesMode::Batch => {
                for (j, l) in labels.iter().enumerate() {
                    if let Some(k) = l {
                        if j != i && *k != p {
                            neg_labels.push(*k);
                        }
                    }
                }
            }
        }
        if opts.include_positive_in_denominator {
            neg_labels.push(p);
        } else if neg_labels.is_empty() {
            continue;
        }
        let mut num = 0.0;
        for s in bank[p].rows() {
            num += (cos(tokens.row(i), s) / opts.tau).exp();
        }
        let mut den = 0.0;
        for &k in &neg_labels {
            for s in bank[k].rows() {
                den += (cos(tokens.row(i), s) / opts.tau).exp();
            }
        }
        total += -(num / den).ln();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

type Matrix3 = Vec<Matrix>;

fn triplet_reference() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(1..=4);
        let labels_k = rng.gen_range(2..=5);
        let m = rng.gen_range(2..=3);
        let d = rng.gen_range(2..=8);
        let bank = random_bank(labels_k, m, d, true, &mut rng);
        let tokens = randn((n, d), &mut rng);
        let labels: Vec<Option<usize>> = (0..n)
            .map(|_| (!rng.gen_bool(0.2)).then(|| rng.gen_range(0..labels_k)))
            .collect();
        let opts = TripletOptions {
            tau: rng.gen_range(0.1..2.0),
            negatives: if seed % 2 == 0 { NegativesMode::Label } else { NegativesMode::Batch },
            include_positive_in_denominator: seed % 5 == 4,
        };
        let got = ok(triplet_contrastive_loss(tokens.view(), &labels, &bank, &opts))?.value;
        let want = reference_triplet(&tokens, &labels, bank.embeddings.as_ref().unwrap(), &opts);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-6, "config {seed}: {got} vs reference {want}");
    }

    // Positive and negative descriptions mirrored across the token's axis.
    let mut bank = random_bank(2, 2, 2, false, &mut ChaCha8Rng::seed_from_u64(0));
    let (a, b) = (0.4f64, 1.3f64);
    bank.embeddings = Some(vec![
        ndarray::array![[a.cos(), a.sin()], [b.cos(), b.sin()]],
        ndarray::array![[a.cos(), -a.sin()], [b.cos(), -b.sin()]],
    ]);
    let tokens = ndarray::array![[2.0, 0.0]];
    let sym = ok(triplet_contrastive_loss(tokens.view(), &[Some(0)], &bank, &TripletOptions::default()))?.value;
    ensure!(sym == 0.0, "symmetric case gave {sym}");
    Ok(format!("50 configurations, worst abs error {worst:.1e}; symmetric case exactly 0"))
}

// 3

fn worst_relative_error(analytic: &[f64], f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let plus = f(&x);
        x[i] = x0[i] - h;
        let minus = f(&x);
        x[i] = x0[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
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

fn random_sample(rng: &mut ChaCha8Rng, dims: [usize; 3], lens: [usize; 3], label: usize) -> Sample {
    let mut e = |m, l, d| ModalityEmbedding::dense(randn((l, d), rng), m).expect("dense");
    Sample {
        id: format!("s{label}"),
        text: e(Modality::Text, lens[0], dims[0]),
        video: e(Modality::Video, lens[1], dims[1]),
        audio: e(Modality::Audio, lens[2], dims[2]),
        label,
    }
}

fn finite_differences() -> Outcome {
    let start = Instant::now();

    // Anchor module with a fixed linear readout of E_m.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::new();
    let cfg = AmeConfig {
        l_t: 4,
        d_t: 4,
        k: 2,
        heads: 1,
        ff_hidden: 1,
        dropout: 0.0,
        layer_norm_eps: 1e-5,
    };
    let ame = AnchorEmbedding::new(&mut ps, cfg, [3, 3, 2], &mut rng);
    let n_ame = ps.scalar_count();
    ensure!(n_ame <= 500, "anchor module has {n_ame} parameters");
    let t = ok(ModalityEmbedding::dense(randn((4, 3), &mut rng), Modality::Text))?;
    let v = ok(ModalityEmbedding::dense(randn((6, 3), &mut rng), Modality::Video))?;
    let a = ok(ModalityEmbedding::dense(randn((3, 2), &mut rng), Modality::Audio))?;
    let readout = randn((4, 4), &mut rng);
    let ame_eval = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let tr = ame.forward_graph(&mut g, &t, &v, &a, None).expect("forward");
        let value = (g.value(tr.e_m) * &readout).sum();
        let root = g.scalar_with_grad(tr.e_m, value, readout.clone());
        (value, g.backward(root).to_flat())
    };
    let analytic = ame_eval(&ps).1;
    let w_ame = worst_relative_error(
        &analytic,
        |x| {
            let mut p = ps.clone();
            p.set_flat(x);
            ame_eval(&p).0
        },
        &ps.to_flat(),
    );

    // Triplet loss with respect to the tokens.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bank = random_bank(4, 3, 5, false, &mut rng);
    let tokens = randn((4, 5), &mut rng);
    let labels = [Some(0), Some(2), Some(2), Some(3)];
    let mut w_tri: f64 = 0.0;
    for negatives in [NegativesMode::Label, NegativesMode::Batch] {
        let opts = TripletOptions {
            tau: 0.7,
            negatives,
            include_positive_in_denominator: false,
        };
        let lg = ok(triplet_contrastive_loss(tokens.view(), &labels, &bank, &opts))?;
        let flat: Vec<f64> = tokens.iter().copied().collect();
        let g: Vec<f64> = lg.grad.iter().copied().collect();
        w_tri = w_tri.max(worst_relative_error(
            &g,
            |x| {
                let m = Matrix::from_shape_vec((4, 5), x.to_vec()).unwrap();
                triplet_contrastive_loss(m.view(), &labels, &bank, &opts).unwrap().value
            },
            &flat,
        ));
    }

    // Joint loss of a whole model.
    let cfg = tiny_config();
    let model = ok(AmessModel::new(&cfg, (0..3).map(|i| format!("L{i}")).collect(), [2, 2, 2]))?;
    let n_model = model.param_count();
    ensure!(n_model <= 500, "model has {n_model} parameters");
    let desc = DescriptionFile {
        prompt_template: String::new(),
        labels: (0..3)
            .map(|l| LabelEntry {
                name: format!("L{l}"),
                descriptions: vec![format!("first {l}"), format!("second {l}")],
            })
            .collect(),
        oos_label: None,
    };
    let bank = ok(embed_descriptions(
        &ok(LabelDescriptionBank::from_file(desc))?,
        &DescriptionEmbedderSpec {
            dim: 4,
            ..Default::default()
        },
    ))?;
    let idx = ok(model.bank_indices(&bank))?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let samples: Vec<Sample> = (0..3).map(|l| random_sample(&mut rng, [2, 2, 2], [3, 4, 2], l)).collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let (_, grads) = ok(model.loss_and_grad(&batch, &bank, &idx, None))?;
    let w_total = worst_relative_error(
        &grads.to_flat(),
        |x| {
            let mut m = model.clone();
            m.params.set_flat(x);
            m.loss_and_grad(&batch, &bank, &idx, None).unwrap().0.total
        },
        &model.params.to_flat(),
    );

    let elapsed = start.elapsed();
    for (name, w) in [("anchor module", w_ame), ("triplet loss", w_tri), ("total loss", w_total)] {
        ensure!(w < 1e-3, "{name}: worst relative error {w:.2e}");
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "worst relative error: anchor module {w_ame:.1e} ({n_ame} params), triplet {w_tri:.1e}, total {w_total:.1e} ({n_model} params)"
    ))
}

// 4

fn scale_invariance() -> Outcome {
    let mut worst_score: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let l = rng.gen_range(2..=10);
        let d = rng.gen_range(2..=8);
        let k = rng.gen_range(1..=l);
        let text = randn((l, d), &mut rng);
        let fused = randn((l, d), &mut rng);
        let mask = vec![true; l];
        let mut st = text.clone();
        let mut sf = fused.clone();
        for mut r in st.rows_mut() {
            r *= 10f64.powf(rng.gen_range(-2.0..2.0));
        }
        for mut r in sf.rows_mut() {
            r *= 10f64.powf(rng.gen_range(-2.0..2.0));
        }
        let (i0, s0) = ok(anchor_ranking(text.view(), fused.view(), &mask, k))?;
        let (i1, s1) = ok(anchor_ranking(st.view(), sf.view(), &mask, k))?;
        ensure!(i0 == i1, "seed {seed}: indices {i0:?} vs {i1:?} after rescaling");
        for (a, b) in s0.iter().zip(&s1) {
            worst_score = worst_score.max((a - b).abs());
        }

        let labels_k = rng.gen_range(2..=4);
        let bank = random_bank(labels_k, 3, d, false, &mut rng);
        let n = rng.gen_range(1..=4);
        let tokens = randn((n, d), &mut rng);
        let mut scaled = tokens.clone();
        for mut r in scaled.rows_mut() {
            r *= 10f64.powf(rng.gen_range(-2.0..2.0));
        }
        let labels: Vec<Option<usize>> = (0..n).map(|_| Some(rng.gen_range(0..labels_k))).collect();
        let opts = TripletOptions::default();
        let a = ok(triplet_contrastive_loss(tokens.view(), &labels, &bank, &opts))?.value;
        let b = ok(triplet_contrastive_loss(scaled.view(), &labels, &bank, &opts))?.value;
        worst_loss = worst_loss.max((a - b).abs());
    }
    ensure!(worst_score <= 1e-9, "anchor scores moved by {worst_score:e}");
    ensure!(worst_loss <= 1e-9, "triplet loss moved by {worst_loss:e}");
    Ok(format!(
        "50 rescalings, indices unchanged, score drift {worst_score:.1e}, loss drift {worst_loss:.1e}"
    ))
}

// 5 and 6

struct Splits {
    _dir: tempfile::TempDir,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    bank: LabelDescriptionBank,
}

fn synthetic(spec: &SyntheticSpec, config: &TrainConfig) -> Result<Splits, String> {
    let dir = ok(tempfile::tempdir())?;
    let out = ok(generate_synthetic(spec, dir.path()))?;
    Ok(Splits {
        train: ok(load_dataset(&out.train, config))?,
        val: ok(load_dataset(&out.val, config))?,
        test: ok(load_dataset(&out.test, config))?,
        bank: ok(load_descriptions(&out.descriptions))?,
        _dir: dir,
    })
}

fn convergence() -> Outcome {
    let config = TrainConfig::toy();
    let data = synthetic(&SyntheticSpec::bundled(), &config)?;
    let bank = ok(prepare_bank(&config, &data.bank, &data.train.label_space))?;
    let pool = ok(rayon::ThreadPoolBuilder::new().num_threads(1).build())?;
    let start = Instant::now();
    let first = ok(pool.install(|| train(&config, &data.train, &data.val, &bank)))?;
    let elapsed = start.elapsed();
    let second = ok(pool.install(|| train(&config, &data.train, &data.val, &bank)))?;

    let best = first.history.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    ensure!(first.history.len() <= 40, "ran {} epochs", first.history.len());
    ensure!(best >= 0.9, "best validation accuracy {best:.3}");
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    let bits = |o: &amess::train_eval::TrainOutcome| -> Vec<(u64, u64, u64)> {
        o.history
            .iter()
            .map(|r| (r.train_loss.to_bits(), r.val_acc.to_bits(), r.val_f1.to_bits()))
            .collect()
    };
    ensure!(bits(&first) == bits(&second), "loss histories differ between identical runs");
    ensure!(
        first.best.params.to_flat() == second.best.params.to_flat(),
        "best parameters differ between identical runs"
    );
    let first_loss = first.history[0].train_loss;
    let last_loss = first.history.last().unwrap().train_loss;
    Ok(format!(
        "val acc {best:.3} at epoch {} of {}, loss {first_loss:.3} -> {last_loss:.3}, {:.1}s on one thread; rerun bitwise identical",
        first.best_epoch,
        first.history.len(),
        elapsed.as_secs_f64()
    ))
}

fn check_sweep_csv(path: &Path, key: &str, values: &[usize]) -> Result<(), String> {
    let mut r = ok(csv::Reader::from_path(path))?;
    let header: Vec<String> = ok(r.headers())?.iter().map(str::to_string).collect();
    ensure!(header == [key, "acc", "f1"], "{}: header {header:?}", path.display());
    let mut seen = Vec::new();
    for rec in r.records() {
        let rec = ok(rec)?;
        ensure!(rec.len() == 3, "{}: row {rec:?}", path.display());
        seen.push(ok(rec[0].parse::<usize>())?);
        for v in [&rec[1], &rec[2]] {
            let x: f64 = ok(v.parse())?;
            ensure!((0.0..=1.0).contains(&x), "{}: value {x} out of range", path.display());
        }
    }
    ensure!(seen == values, "{}: rows for {seen:?}, expected {values:?}", path.display());
    Ok(())
}

fn sweeps() -> Outcome {
    let config = TrainConfig::toy();
    let data = synthetic(&SyntheticSpec::bundled(), &config)?;
    let split = SweepData {
        train: &data.train,
        val: &data.val,
        eval: &data.test,
    };
    let ks = [2, 4, 8, 16, config.model.l_t];
    let ms = [2, 3];
    let out = ok(tempfile::tempdir())?;
    let anchors = ok(anchor_sweep(&config, &ks, split, &data.bank))?;
    let descs = ok(description_count_sweep(&config, &ms, split, &data.bank))?;
    let pa = out.path().join("sweep_anchors.csv");
    let pd = out.path().join("sweep_descriptions.csv");
    ok(write_sweep_csv(&pa, "k", &anchors))?;
    ok(write_sweep_csv(&pd, "m", &descs))?;
    check_sweep_csv(&pa, "k", &ks)?;
    check_sweep_csv(&pd, "m", &ms)?;
    let accs: Vec<String> = anchors.iter().map(|p| format!("k={}:{:.2}", p.value, p.report.acc)).collect();
    Ok(format!("well-formed CSVs; test acc {}", accs.join(" ")))
}

// 7

fn metrics() -> Outcome {
    let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
    let r = ok(MetricsReport::from_predictions(
        &[0, 0, 1, 1],
        &[0, 1, 1, 1],
        &names,
        amess::config::Average::Macro,
        None,
    ))?;
    // class a: P 1, R 1/2, F1 2/3; class b: P 2/3, R 1, F1 4/5
    let want = [(r.acc, 0.75), (r.precision, 5.0 / 6.0), (r.recall, 0.75), (r.f1, (2.0 / 3.0 + 0.8) / 2.0)];
    for (got, w) in want {
        ensure!((got - w).abs() <= 1e-9, "fixture value {got} vs {w}");
    }
    let r = ok(MetricsReport::from_predictions(
        &[0, 0, 0, 1],
        &[0, 0, 1, 1],
        &names,
        amess::config::Average::Weighted,
        None,
    ))?;
    // a: P 1, R 2/3, F1 4/5 (support 3); b: P 1/2, R 1, F1 2/3 (support 1)
    let wf1 = (0.8 * 3.0 + 2.0 / 3.0) / 4.0;
    ensure!((r.f1 - wf1).abs() <= 1e-9, "weighted F1 {} vs {wf1}", r.f1);

    let mut config = TrainConfig::toy();
    config.optim.epochs = 4;
    config.optim.patience = 4;
    let spec = SyntheticSpec {
        n_train: 120,
        n_val: 40,
        n_test: 40,
        n_classes: 3,
        oos_fraction: 0.25,
        ..SyntheticSpec::bundled()
    };
    let data = synthetic(&spec, &config)?;
    let bank = ok(prepare_bank(&config, &data.bank, &data.train.label_space))?;
    let model = ok(train(&config, &data.train, &data.val, &bank))?.best;
    let report = ok(evaluate(&model, &data.test, true))?;
    let oos = data.test.oos_index().ok_or_else(|| "split has no OOS label".to_string())?;

    let truth: Vec<usize> = data.test.samples.iter().map(|s| s.label).collect();
    let pred: Vec<usize> = ok(data.test.samples.iter().map(|s| model.predict(s)).collect::<amess::Result<Vec<_>>>())?;
    let f1_of = |c: usize| {
        let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let fp = truth.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
        let fn_ = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    let inscope: Vec<usize> = (0..data.test.label_space.len())
        .filter(|&c| c != oos && (truth.contains(&c) || pred.contains(&c)))
        .collect();
    let f1_is = inscope.iter().map(|&c| f1_of(c)).sum::<f64>() / inscope.len() as f64;
    let f1_os = f1_of(oos);
    let got_is = report.f1_is.ok_or_else(|| "F1-IS missing".to_string())?;
    let got_os = report.f1_os.ok_or_else(|| "F1-OS missing".to_string())?;
    ensure!((got_is - f1_is).abs() <= 1e-9, "F1-IS {got_is} vs {f1_is}");
    ensure!((got_os - f1_os).abs() <= 1e-9, "F1-OS {got_os} vs {f1_os}");
    let json = ok(serde_json::to_value(&report))?;
    for key in ["ACC", "F1", "P", "R", "F1-IS", "F1-OS"] {
        ensure!(json.get(key).is_some(), "report JSON lacks {key}");
    }
    Ok(format!(
        "fixtures exact to 1e-9; OOS split ACC {:.3} F1-IS {got_is:.3} F1-OS {got_os:.3}",
        report.acc
    ))
}

// 8

fn residual_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::new();
    let block = CrossAttentionBlock::new(&mut ps, "probe", 6, 2, 5, &mut rng);
    block.ff.set_zero(&mut ps);
    let set = |m: Matrix| AnchorSet {
        indices: (0..m.nrows()).collect(),
        scores: vec![1.0; m.nrows()],
        vectors: m,
    };
    let target = set(randn((4, 6), &mut rng));
    let source = set(randn((4, 6), &mut rng));
    let out = ok(anchor_cross_attention(&ps, &block, &target, &source))?;
    ensure!(out.vectors == target.vectors, "anchor interaction with zero feed-forward changed its input");

    let norm = LayerNorm::new(&mut ps, "probe.norm", 6, 1e-5);
    let e_vm = randn((5, 6), &mut rng);
    let zero = Matrix::zeros((5, 6));
    let mut worst: f64 = 0.0;
    for (x, y, other) in [(&e_vm, &zero, &e_vm), (&zero, &e_vm, &e_vm)] {
        let got = ok(combine(&ps, &norm, x, y, 0.0, None))?;
        for (i, row) in other.rows().into_iter().enumerate() {
            let mean = row.sum() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            let want: Array1<f64> = row.mapv(|v| (v - mean) / (var + 1e-5).sqrt());
            for (a, b) in got.row(i).iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure!(worst <= 1e-12, "combine with a zero stream differs from LayerNorm by {worst:e}");
    Ok(format!("zero feed-forward residual is bitwise identity; combine vs LayerNorm {worst:.1e}"))
}

// 9

fn bank_digest(bank: &LabelDescriptionBank) -> String {
    let mut h = Sha256::new();
    for (name, descs) in bank.labels.iter().zip(&bank.descriptions) {
        for d in descs {
            h.update(format!("{name}\t{d}\n"));
        }
    }
    hex::encode(h.finalize())
}

const MINTREC_DIGEST: &str = "fcb88027fd490856bf3b6c277c5b9106339eba2732d4c64f748afb7890932c86";
const MINTREC2_DIGEST: &str = "2c368af9e3bc7afa52c9bce18aa3cb2866d8bd9c9bd3d4de3347b206d8132425";

fn bundled_banks() -> Outcome {
    let b1 = LabelDescriptionBank::bundled_mintrec();
    let b2 = LabelDescriptionBank::bundled_mintrec2();
    ensure!(b1.len() == 20 && b1.m() == 3, "first bank is {}x{}", b1.len(), b1.m());
    ensure!(b2.len() == 30 && b2.m() == 3, "second bank is {}x{}", b2.len(), b2.m());
    ensure!(b1.oos_label.is_none(), "first bank has an OOS label");
    ensure!(b2.oos_label.as_deref() == Some("UNKNOWN"), "second bank OOS label {:?}", b2.oos_label);
    ensure!(b2.index_of("UNKNOWN").is_none(), "UNKNOWN must have no descriptions");

    let spot = [
        (&b1, "Complain", 0, "To express dissatisfaction or annoyance about something."),
        (&b1, "Ask for Help", 2, "To ask someone to take action or provide aid in a task."),
        (&b2, "Doubt", 1, "Questioning the truth or validity of a statement or belief."),
        (&b2, "Ask for Help", 1, "To seek guidance or advice in solving a problem."),
    ];
    for (bank, label, j, text) in spot {
        let i = bank.index_of(label).ok_or_else(|| format!("label {label} missing"))?;
        ensure!(bank.descriptions[i][j] == text, "{label}[{j}] = {:?}", bank.descriptions[i][j]);
    }
    let (d1, d2) = (bank_digest(&b1), bank_digest(&b2));
    ensure!(d1 == MINTREC_DIGEST, "first bank digest {d1}");
    ensure!(d2 == MINTREC2_DIGEST, "second bank digest {d2}");

    // Out-of-scope members leave the loss and the in-scope gradients unchanged.
    let bank = ok(embed_descriptions(
        &b2,
        &DescriptionEmbedderSpec {
            dim: 16,
            ..Default::default()
        },
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens = randn((5, 16), &mut rng);
    let labels: Vec<Option<usize>> = vec![Some(0), Some(3), Some(3), Some(7), Some(12)];
    let extra = randn((3, 16), &mut rng);
    let mut with_oos = labels.clone();
    with_oos.extend([None, None, None]);
    let all = ndarray::concatenate![ndarray::Axis(0), tokens, extra];
    for negatives in [NegativesMode::Label, NegativesMode::Batch] {
        let opts = TripletOptions {
            negatives,
            ..TripletOptions::default()
        };
        let base = ok(triplet_contrastive_loss(tokens.view(), &labels, &bank, &opts))?;
        let mixed = ok(triplet_contrastive_loss(all.view(), &with_oos, &bank, &opts))?;
        ensure!(base.value == mixed.value, "{negatives:?}: {} vs {}", base.value, mixed.value);
        ensure!(
            mixed.grad.slice(ndarray::s![5.., ..]).iter().all(|&g| g == 0.0),
            "{negatives:?}: UNKNOWN rows received gradient"
        );
    }
    Ok("20x3 and 30x3 + UNKNOWN, text verbatim, UNKNOWN members leave the loss unchanged".into())
}
