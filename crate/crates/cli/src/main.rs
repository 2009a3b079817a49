use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amess::cli_data::{generate_synthetic, load_dataset, load_manifest, Dataset, SyntheticSpec};
use amess::model_core::AmessModel;
use amess::semantic_sync::{
    embed_descriptions, load_descriptions, pca_semantic_analysis, write_analysis_csv, LabelDescriptionBank,
};
use amess::train_eval::{
    anchor_sweep, collect_tokens, description_count_sweep, evaluate, prepare_bank, train, write_history_csv,
    write_sweep_csv, SweepData,
};
use amess::{Error, Result, TrainConfig};
use clap::{Args, Parser, Subcommand};

/// Anchor-based multimodal intent recognition: data, training, evaluation
/// and analysis.
#[derive(Parser, Debug)]
#[command(name = "amess", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where outputs go; generated data lives in `<out-dir>/data`.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Config override, e.g. `--set optim.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and keep the best-validation checkpoint.
    Train(DataArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Retrain for each anchor count and write `sweep_anchors.csv`.
    SweepAnchors {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated anchor counts.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
    /// Retrain for each description count and write `sweep_descriptions.csv`.
    SweepDescriptions {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated descriptions-per-label counts.
        #[arg(long, value_delimiter = ',', required = true)]
        m: Vec<usize>,
    },
    /// Joint PCA of pooled tokens, synchronized tokens and descriptions; one
    /// CSV per label.
    AnalyzePca(PcaArgs),
    /// Write a synthetic dataset to `<out-dir>/data`.
    GenData(GenArgs),
    /// Load and validate manifests.
    ValidateData {
        /// Manifests to check; defaults to the generated splits.
        manifests: Vec<PathBuf>,
    },
    /// Embed a description file and write the vectors as JSON.
    EmbedDescriptions {
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Split the sweeps report on.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest to evaluate; defaults to the test split.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Report F1-IS and F1-OS for the split's out-of-scope label.
    #[arg(long)]
    oos: bool,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    /// Comma-separated labels, one CSV each.
    #[arg(long, value_delimiter = ',', default_value = "Agree,Joke,Criticize,Oppose")]
    labels: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// TOML synthetic spec; the bundled separable preset otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    oos_fraction: Option<f64>,
    #[arg(long)]
    descriptions_per_label: Option<usize>,
}

struct Ctx {
    config: TrainConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    fn split_path(&self, flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> PathBuf {
        flag.clone()
            .or_else(|| configured.clone())
            .unwrap_or_else(|| self.data_dir().join(format!("{name}.jsonl")))
    }

    fn load(&self, path: &Path) -> Result<Dataset> {
        log::info!("loading {}", path.display());
        load_dataset(path, &self.config)
    }

    /// Flag, then config, then the generated file, then the bundled banks.
    fn bank(&self, flag: &Option<PathBuf>) -> Result<LabelDescriptionBank> {
        let generated = self.data_dir().join("descriptions.json");
        match flag.clone().or_else(|| self.config.data.descriptions.clone()) {
            Some(p) => load_descriptions(&p),
            None if generated.is_file() => load_descriptions(&generated),
            None => Ok(LabelDescriptionBank::bundled_mintrec2()),
        }
    }

    fn checkpoint(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        Ok(self.out_dir.join(name))
    }

    fn sweep_splits(&self, d: &DataArgs) -> Result<(Dataset, Dataset, Dataset)> {
        let c = &self.config.data;
        let train = self.load(&self.split_path(&d.train, &c.train, "train"))?;
        let val = self.load(&self.split_path(&d.val, &c.val, "val"))?;
        let test = self.load(&self.split_path(&d.test, &c.test, "test"))?;
        Ok((train, val, test))
    }
}

fn resolve_config(cli: &Cli) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in &cli.overrides {
        config.set(o)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        config: resolve_config(&cli)?,
        out_dir: cli.out_dir.clone(),
    };
    match cli.command {
        Command::GenData(args) => gen_data(&ctx, args, cli.seed),
        Command::ValidateData { manifests } => {
            let paths = if manifests.is_empty() {
                ["train", "val", "test"]
                    .iter()
                    .map(|s| ctx.data_dir().join(format!("{s}.jsonl")))
                    .collect()
            } else {
                manifests
            };
            for p in paths {
                let m = load_manifest(&p)?;
                println!(
                    "{}: ok ({} records, {} labels, split {})",
                    p.display(),
                    m.len(),
                    m.label_space().len(),
                    m.split().as_str()
                );
            }
            Ok(())
        }
        Command::EmbedDescriptions { descriptions } => {
            let bank = embed_descriptions(&ctx.bank(&descriptions)?, &ctx.config.embedder)?;
            let emb = bank.embeddings.as_ref().expect("embedded");
            let out: Vec<serde_json::Value> = bank
                .labels
                .iter()
                .zip(&bank.descriptions)
                .zip(emb)
                .map(|((l, d), e)| {
                    serde_json::json!({
                        "label": l,
                        "descriptions": d,
                        "embeddings": e.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let path = ctx.out("description_embeddings.json")?;
            write_json(&path, &out)?;
            println!("wrote {} ({} labels × {})", path.display(), bank.len(), bank.m());
            Ok(())
        }
        Command::Train(d) => {
            let c = &ctx.config.data;
            let train_set = ctx.load(&ctx.split_path(&d.train, &c.train, "train"))?;
            let val_set = ctx.load(&ctx.split_path(&d.val, &c.val, "val"))?;
            let bank = prepare_bank(&ctx.config, &ctx.bank(&d.descriptions)?, &train_set.label_space)?;
            let out = train(&ctx.config, &train_set, &val_set, &bank)?;
            let ck = ctx.out("checkpoint.json")?;
            out.best.save(&ck)?;
            if let Some(last) = &out.last {
                last.save(&ctx.out("last.json")?)?;
            }
            write_history_csv(&ctx.out("history.csv")?, &out.history)?;
            ctx.config.save(&ctx.out("config.toml")?)?;
            println!(
                "best epoch {} of {}: val_acc {:.4} val_f1 {:.4}; wrote {}",
                out.best_epoch,
                out.history.len(),
                out.best_val.acc,
                out.best_val.f1,
                ck.display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            let model = AmessModel::load(&ctx.checkpoint(&a.checkpoint))?;
            // Encoders follow the checkpoint's config, not the CLI's.
            let cfg = model.config.clone();
            let split = ctx.split_path(&a.split, &cfg.data.test, "test");
            let data = load_dataset(&split, &cfg)?;
            let report = evaluate(&model, &data, a.oos)?;
            let path = ctx.out("metrics.json")?;
            write_json(&path, &report)?;
            let mut line = format!("ACC {:.4} F1 {:.4} P {:.4} R {:.4}", report.acc, report.f1, report.precision, report.recall);
            if let (Some(is), Some(os)) = (report.f1_is, report.f1_os) {
                line.push_str(&format!(" F1-IS {is:.4} F1-OS {os:.4}"));
            }
            println!("{line}");
            Ok(())
        }
        Command::SweepAnchors { data, k } => {
            let (tr, va, te) = ctx.sweep_splits(&data)?;
            let bank = ctx.bank(&data.descriptions)?;
            let points = anchor_sweep(&ctx.config, &k, SweepData { train: &tr, val: &va, eval: &te }, &bank)?;
            let path = ctx.out("sweep_anchors.csv")?;
            write_sweep_csv(&path, "k", &points)?;
            println!("wrote {} ({} rows)", path.display(), points.len());
            Ok(())
        }
        Command::SweepDescriptions { data, m } => {
            let (tr, va, te) = ctx.sweep_splits(&data)?;
            let bank = ctx.bank(&data.descriptions)?;
            let points =
                description_count_sweep(&ctx.config, &m, SweepData { train: &tr, val: &va, eval: &te }, &bank)?;
            let path = ctx.out("sweep_descriptions.csv")?;
            write_sweep_csv(&path, "m", &points)?;
            println!("wrote {} ({} rows)", path.display(), points.len());
            Ok(())
        }
        Command::AnalyzePca(a) => analyze_pca(&ctx, a),
    }
}

fn gen_data(ctx: &Ctx, a: GenArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Toml { path: p.clone(), source: e })?
        }
        None => SyntheticSpec::bundled(),
    };
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut spec.n_train, a.n_train);
    set(&mut spec.n_val, a.n_val);
    set(&mut spec.n_test, a.n_test);
    set(&mut spec.n_classes, a.n_classes);
    set(&mut spec.descriptions_per_label, a.descriptions_per_label);
    if let Some(m) = a.margin {
        spec.margin = m;
    }
    if let Some(f) = a.oos_fraction {
        spec.oos_fraction = f;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = generate_synthetic(&spec, &ctx.data_dir())?;
    for p in [&out.train, &out.val, &out.test, &out.descriptions] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn analyze_pca(ctx: &Ctx, a: PcaArgs) -> Result<()> {
    let model = AmessModel::load(&ctx.checkpoint(&a.checkpoint))?;
    let cfg = model.config.clone();
    let data = load_dataset(&ctx.split_path(&a.split, &cfg.data.test, "test"), &cfg)?;
    let bank = prepare_bank(&cfg, &ctx.bank(&a.descriptions)?, &model.label_space)?;
    for label in &a.labels {
        let idx = model
            .label_space
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::LabelMismatch(format!("label `{label}` not in the checkpoint's label space")))?;
        let b = bank
            .index_of(label)
            .ok_or_else(|| Error::Descriptions(format!("label `{label}` has no descriptions")))?;
        let samples: Vec<_> = data.samples.iter().filter(|s| s.label == idx).collect();
        if samples.is_empty() {
            return Err(Error::invalid(format!("no `{label}` samples in the {} split", data.split.as_str())));
        }
        let (before, after) = collect_tokens(&model, &samples)?;
        let analysis = pca_semantic_analysis(&before, &after, bank.embedding(b)?)?;
        let file = format!("pca_{}.csv", label.replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
        let path = ctx.out(&file)?;
        write_analysis_csv(&path, label, &analysis)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code == 0 {
                return ExitCode::SUCCESS;
            }
            eprintln!("amess: error code=USAGE: {}", e.kind());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("amess: error code={}: {msg}", e.code());
            ExitCode::from(1)
        }
    }
}
