//! Command-line surface: data generation, training, evaluation, ablation,
//! parameter accounting, embedding export and gradient checking.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hycora::adapter::{attach, count_trainable, AdapterStrategy, Decoding, HyperModel};
use hycora::backbone::Backbone;
use hycora::config::ExperimentConfig;
use hycora::contrastive::ContrastiveHead;
use hycora::corpus::{self, Dataset, RoleProfile};
use hycora::error::Error;
use hycora::evaluation::{
    build_probes, evaluate, pca_2d, role_signature_accuracy, separation_ratio,
};
use hycora::tensor::Tensor;
use hycora::training::{
    encode_sample, grad_check, load_checkpoint, metrics_csv, prefit_backbone, save_checkpoint,
    Trainer,
};

#[derive(Parser)]
#[command(name = "hycora", version, about = "Role-adaptive low-rank tuning testbed")]
struct Cli {
    /// Print the fully resolved default configuration and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it as JSONL.
    MakeData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one strategy; writes checkpoint, metrics CSV and config snapshot.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config adapter strategy.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional config override; defaults to the checkpoint's snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-shot generation: role + prompt → continuation on stdout.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        role: usize,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 48)]
        max_new_tokens: usize,
        /// Sample with this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Train and evaluate all five adapter strategies with a shared seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable-parameter sweep over role counts.
    Params {
        /// Inclusive range `a..b` or a single count.
        #[arg(long, default_value = "1..100")]
        roles: String,
        /// Strategy name or `all`.
        #[arg(long, default_value = "all")]
        strategy: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export role-specific matrices (raw + 2-D PCA) from a checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of analytic gradients (tiny model).
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_config {
        print!("{}", ExperimentConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no subcommand; try --help");
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Validation(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_config(
    path: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
) -> hycora::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out_dir = out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out_dir)?;
    Ok((cfg, out_dir))
}

/// Full dataset plus train/test split; profiles only for synthetic corpora.
fn build_data(
    cfg: &ExperimentConfig,
) -> hycora::Result<(Dataset, Dataset, Option<Vec<RoleProfile>>)> {
    let (full, profiles) = match &cfg.corpus.path {
        Some(path) => (corpus::load_jsonl(path)?, None),
        None => {
            let ccfg = cfg.corpus_config();
            (
                corpus::generate_corpus(&ccfg)?,
                Some(corpus::generate_profiles(&ccfg)?),
            )
        }
    };
    full.validate()?;
    let split_seed = hycora::rng::derive_seed(cfg.seed, "split");
    let (train, test) = corpus::split_dataset(&full, cfg.corpus.test_ratio, split_seed);
    Ok((train, test, profiles))
}

/// Randomly initialized backbone, pre-fit on the train split, frozen.
fn prepare_backbone(cfg: &ExperimentConfig, train: &Dataset) -> hycora::Result<Backbone> {
    let mut bb = Backbone::init(&cfg.backbone_config(), cfg.seed)?;
    if cfg.backbone.prefit_epochs > 0 {
        prefit_backbone(&mut bb, train, cfg.backbone.prefit_epochs, &cfg.train_config())?;
    }
    Ok(bb)
}

fn build_head(
    cfg: &ExperimentConfig,
    strategy: AdapterStrategy,
) -> hycora::Result<Option<ContrastiveHead>> {
    if !strategy.uses_hypernet() {
        return Ok(None);
    }
    Ok(Some(ContrastiveHead::init(
        cfg.contrastive.m_proj,
        cfg.hypernet.d_c,
        cfg.backbone.d_model,
        cfg.seed,
    )?))
}

fn train_strategy(
    cfg: &ExperimentConfig,
    strategy: AdapterStrategy,
    backbone: Backbone,
    train_ds: &Dataset,
) -> hycora::Result<Trainer> {
    let model = attach(
        strategy,
        backbone,
        &cfg.hyper_config(),
        cfg.adapter_config(),
        train_ds.num_roles,
        cfg.seed,
    )?;
    let head = build_head(cfg, strategy)?;
    let mut trainer = Trainer::new(model, head, cfg.train_config(), cfg.seed)?;
    trainer.config_snapshot = cfg.to_toml();
    trainer.run(train_ds)?;
    Ok(trainer)
}

fn eval_model(
    cfg: &ExperimentConfig,
    model: &HyperModel,
    test: &Dataset,
) -> hycora::Result<hycora::evaluation::EvalReport> {
    evaluate(
        model,
        test,
        &Decoding::Greedy,
        cfg.eval.max_new_tokens,
        cfg.eval.max_n,
    )
}

fn write(path: &Path, contents: &str) -> hycora::Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn run(command: Command) -> hycora::Result<ExitCode> {
    match command {
        Command::MakeData { config, seed, out } => {
            let (cfg, out_dir) = load_config(&config, seed, &out)?;
            let ds = corpus::generate_corpus(&cfg.corpus_config())?;
            corpus::save_jsonl(&ds, out_dir.join("corpus.jsonl"))?;
            write(&out_dir.join("config.toml"), &cfg.to_toml())?;
            println!(
                "wrote {} samples across {} roles to {}",
                ds.len(),
                ds.num_roles,
                out_dir.join("corpus.jsonl").display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Train {
            config,
            seed,
            out,
            strategy,
        } => {
            let (mut cfg, out_dir) = load_config(&config, seed, &out)?;
            if let Some(s) = strategy {
                cfg.adapter.strategy = AdapterStrategy::parse(&s)?;
            }
            let (train_ds, test_ds, _) = build_data(&cfg)?;
            let backbone = prepare_backbone(&cfg, &train_ds)?;
            let trainer = train_strategy(&cfg, cfg.adapter.strategy, backbone, &train_ds)?;
            save_checkpoint(out_dir.join("checkpoint.ckpt"), &trainer)?;
            write(&out_dir.join("metrics.csv"), &metrics_csv(&trainer.log))?;
            write(&out_dir.join("config.toml"), &cfg.to_toml())?;
            let last = trainer.log.last().expect("at least one epoch");
            println!(
                "trained {} for {} epochs ({} train / {} test samples); final total loss {:.4}",
                cfg.adapter.strategy.name(),
                trainer.epoch,
                train_ds.len(),
                test_ds.len(),
                last.total
            );
            println!("checkpoint: {}", out_dir.join("checkpoint.ckpt").display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            checkpoint,
            config,
            out,
        } => {
            let trainer = load_checkpoint(&checkpoint)?;
            let cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => toml::from_str(&trainer.config_snapshot)
                    .map_err(|e| Error::config(format!("checkpoint config snapshot: {e}")))?,
            };
            let out_dir = out.unwrap_or_else(|| PathBuf::from("runs"));
            std::fs::create_dir_all(&out_dir)?;
            let (_, test_ds, profiles) = build_data(&cfg)?;
            let report = eval_model(&cfg, &trainer.model, &test_ds)?;
            write(&out_dir.join("eval.csv"), &report.to_csv())?;
            write(&out_dir.join("eval.txt"), &report.table())?;
            print!("{}", report.table());
            if let Some(profiles) = profiles {
                let probes = build_probes(&test_ds);
                if !probes.is_empty() {
                    let acc = role_signature_accuracy(
                        &trainer.model,
                        &probes,
                        &profiles,
                        cfg.eval.max_new_tokens,
                    )?;
                    println!("role signature accuracy: {acc:.4} ({} probes)", probes.len());
                }
            }
            println!("wrote {}", out_dir.join("eval.csv").display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Generate {
            checkpoint,
            role,
            prompt,
            max_new_tokens,
            temperature,
            sample_seed,
        } => {
            let trainer = load_checkpoint(&checkpoint)?;
            let decoding = match temperature {
                Some(t) => Decoding::Sample {
                    temperature: t,
                    seed: sample_seed,
                },
                None => Decoding::Greedy,
            };
            let text = trainer.model.generate(
                &hycora::training::prompt_text(&prompt),
                role,
                max_new_tokens,
                &decoding,
            )?;
            println!("{}", text.trim());
            Ok(ExitCode::SUCCESS)
        }

        Command::Ablate { config, seed, out } => {
            let (cfg, out_dir) = load_config(&config, seed, &out)?;
            let (train_ds, test_ds, _) = build_data(&cfg)?;
            let backbone = prepare_backbone(&cfg, &train_ds)?;
            let mut csv = String::from("strategy,bleu,rouge1,rouge2,rougeL,trainable_params\n");
            for strategy in AdapterStrategy::ALL {
                let trainer = train_strategy(&cfg, strategy, backbone.clone(), &train_ds)?;
                let report = eval_model(&cfg, &trainer.model, &test_ds)?;
                let overall = report.overall();
                let trainable = trainer.model.trainable_scalars()
                    + trainer.head.as_ref().map_or(0, |h| h.trainable_scalars());
                csv.push_str(&format!(
                    "{},{:.4},{:.4},{:.4},{:.4},{}\n",
                    strategy.name(),
                    overall.bleu,
                    overall.rouge_1,
                    overall.rouge_2,
                    overall.rouge_l,
                    trainable
                ));
                println!(
                    "{:<16} bleu {:.4} rougeL {:.4} trainable {}",
                    strategy.name(),
                    overall.bleu,
                    overall.rouge_l,
                    trainable
                );
            }
            write(&out_dir.join("ablate.csv"), &csv)?;
            write(&out_dir.join("config.toml"), &cfg.to_toml())?;
            println!("wrote {}", out_dir.join("ablate.csv").display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Params {
            roles,
            strategy,
            config,
            out,
        } => {
            let cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let (lo, hi) = parse_role_range(&roles)?;
            let strategies: Vec<AdapterStrategy> = if strategy == "all" {
                AdapterStrategy::ALL.to_vec()
            } else {
                vec![AdapterStrategy::parse(&strategy)?]
            };
            let mut csv = String::from(
                "strategy,roles,hypernet,shared_a,shared_b,per_role_adapters,contrastive_head,total_trainable\n",
            );
            for s in &strategies {
                for c in lo..=hi {
                    let b = count_trainable(
                        *s,
                        &cfg.backbone_config(),
                        &cfg.hyper_config(),
                        &cfg.adapter_config(),
                        cfg.contrastive.m_proj,
                        c,
                    );
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        s.name(),
                        c,
                        b.hypernet,
                        b.shared_a,
                        b.shared_b,
                        b.per_role_adapters,
                        b.contrastive_head,
                        b.total_trainable
                    ));
                }
            }
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    write(&dir.join("params.csv"), &csv)?;
                    println!("wrote {}", dir.join("params.csv").display());
                }
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::ExportEmbeddings { checkpoint, out } => {
            let trainer = load_checkpoint(&checkpoint)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from("runs"));
            std::fs::create_dir_all(&out_dir)?;
            let mut raw = Vec::new();
            trainer.model.export_role_matrices_csv(&mut raw)?;
            write(
                &out_dir.join("role_matrices.csv"),
                std::str::from_utf8(&raw).expect("csv is utf-8"),
            )?;

            let rows = trainer.model.export_role_matrices()?;
            let width = rows[0].2.len();
            let flat: Vec<f64> = rows.iter().flat_map(|r| r.2.iter().copied()).collect();
            let matrix = Tensor::from_vec(rows.len(), width, flat);
            let pca = pca_2d(&matrix)?;
            let mut pca_csv = String::from("role_id,site_id,x,y\n");
            for ((role, site, _), (x, y)) in rows.iter().zip(&pca.coords) {
                pca_csv.push_str(&format!("{role},{site},{x:.8e},{y:.8e}\n"));
            }
            write(&out_dir.join("role_matrices_pca.csv"), &pca_csv)?;
            let roles: Vec<usize> = rows.iter().map(|r| r.0).collect();
            println!(
                "exported {} rows; separation ratio {:.4}{}",
                rows.len(),
                separation_ratio(&pca.coords, &roles),
                if pca.rank_deficient { " (rank deficient)" } else { "" }
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::GradCheck { eps, tol } => {
            let started = std::time::Instant::now();
            let (mut model, mut head, batch, cfg) = gradcheck_fixture()?;
            hycora::training::audit_param_groups(&model, head.as_ref())?;
            println!(
                "trainable scalars: {}",
                model.trainable_scalars() + head.as_ref().map_or(0, |h| h.trainable_scalars())
            );
            // λ = 0 regime: before the ramp
            let report0 = grad_check(&mut model, head.as_mut(), &batch, 0.0, &cfg, eps, tol, 8)?;
            println!("{report0}");
            // λ = 0.5 regime: past the ramp end with lambda_max = 0.5
            let report1 = grad_check(&mut model, head.as_mut(), &batch, 4.0, &cfg, eps, tol, 8)?;
            println!("{report1}");
            println!("elapsed: {:.1}s", started.elapsed().as_secs_f64());
            if report0.passed && report1.passed {
                println!("grad-check: PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("grad-check: FAIL");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

fn parse_role_range(s: &str) -> hycora::Result<(usize, usize)> {
    if let Some((a, b)) = s.split_once("..") {
        let lo: usize = a
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad role range: {s}")))?;
        let hi: usize = b
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad role range: {s}")))?;
        if lo == 0 || hi < lo {
            return Err(Error::config(format!("bad role range: {s}")));
        }
        Ok((lo, hi))
    } else {
        let n: usize = s
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad role count: {s}")))?;
        if n == 0 {
            return Err(Error::config("role count must be >= 1"));
        }
        Ok((n, n))
    }
}

/// The tiny double-precision setup used by the gradient suite: d_model 16,
/// one layer, rank 2, hidden width 8, λ ramping to 0.5.
fn gradcheck_fixture() -> hycora::Result<(
    HyperModel,
    Option<ContrastiveHead>,
    Vec<hycora::training::EncodedSample>,
    hycora::training::TrainConfig,
)> {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 1234;
    cfg.backbone.d_model = 16;
    cfg.backbone.n_layers = 1;
    cfg.backbone.n_heads = 2;
    cfg.backbone.context_len = 64;
    cfg.backbone.prefit_epochs = 0;
    cfg.hypernet.d_c = 4;
    cfg.hypernet.d_l = 2;
    cfg.hypernet.d_h = 8;
    cfg.hypernet.n_blocks = 1;
    cfg.hypernet.k = 3;
    cfg.adapter.rank = 2;
    cfg.adapter.alpha = 4.0;
    cfg.contrastive.m_proj = 8;
    cfg.contrastive.lambda_min = 0.0;
    cfg.contrastive.lambda_max = 0.5;
    cfg.contrastive.ep_start = 1.0;
    cfg.contrastive.ep_end = 2.0;

    let corpus_cfg = hycora::corpus::CorpusConfig {
        num_roles: 2,
        samples_per_role: 4,
        shared_fact_count: 1,
        seed: 77,
    };
    let ds = corpus::generate_corpus(&corpus_cfg)?;
    let backbone = Backbone::init(&cfg.backbone_config(), cfg.seed)?;
    let mut model = attach(
        AdapterStrategy::Hycora,
        backbone,
        &cfg.hyper_config(),
        cfg.adapter_config(),
        ds.num_roles,
        cfg.seed,
    )?;
    // move off the zero-init point so gradients flow through both adapter
    // factors (B = 0 would make the A-path check vacuous)
    let mut rng = hycora::rng::rng_for(cfg.seed, "gradcheck-b");
    for i in 0..model.store.len() {
        let e = model.store.entry(i);
        if e.trainable && e.name.contains("b_sh") {
            let (r, c) = e.value.shape();
            *model.store.get_mut(i) = Tensor::kaiming_uniform(r, c, &mut rng);
        }
    }
    let head = build_head(&cfg, AdapterStrategy::Hycora)?;
    let tokenizer = hycora::backbone::ByteTokenizer::new(cfg.backbone.context_len);
    let batch: Vec<_> = ds.samples[..4]
        .iter()
        .map(|s| encode_sample(&tokenizer, s, true))
        .collect();
    Ok((model, head, batch, cfg.train_config()))
}
