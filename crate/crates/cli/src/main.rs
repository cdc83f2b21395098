use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use maskunit::clustering::{FitConfig, FitMethod};
use maskunit::metrics::evaluate_files;
use maskunit::model::checkpoint;
use maskunit::pipeline::stages::{
    cluster_assign_stage, cluster_fit_stage, extract_stage, mfcc_stage, train_stage, ClusterFitOptions,
    TrainOverrides, TrainStageConfig,
};
use maskunit::pipeline::studies::{
    alpha_sweep, ensemble_run, layer_sweep, mask_prob_sweep, stability_study, EnsembleTeacher,
};
use maskunit::pipeline::{gen_synthetic_corpus, write_json, PipelineConfig, RunContext, SyntheticCorpusSpec};
use maskunit::seed::derive_seed;

#[derive(Parser)]
#[command(name = "maskunit", version, about = "Hidden-unit discovery and masked prediction")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Acoustic feature extraction.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Fit codebooks and assign units.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Train a masked prediction model on unit labels.
    Train(TrainArgs),
    /// Dump one encoder layer as feature files.
    Extract(ExtractArgs),
    /// Score unit labels against phone alignments.
    Metrics(MetricsArgs),
    /// Write a synthetic corpus with ground-truth phones.
    Synth(SynthArgs),
    /// Full refinement loop and ablation studies.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// 39-dim MFCCs for every manifest entry.
    Mfcc {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Concatenate this many neighbouring frames (odd).
        #[arg(long)]
        splice: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Minibatch,
    Lloyd,
}

#[derive(Subcommand)]
enum ClusterCmd {
    Fit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        batch_size: usize,
        /// k-means++ restarts; the best seeding is kept.
        #[arg(long, default_value_t = 20)]
        starts: usize,
        /// Fraction of utterances used for fitting.
        #[arg(long, default_value_t = 0.1)]
        subsample: f64,
        #[arg(long, default_value_t = 100)]
        max_batches: usize,
        #[arg(long, value_enum, default_value_t = Method::Minibatch)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Assign {
        /// Codebook file or ensemble directory.
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// One label file per prediction head.
    #[arg(long = "labels", required = true)]
    labels: Vec<PathBuf>,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Phone label file or directory of label files.
    #[arg(long)]
    phones: PathBuf,
    /// Unit label file or directory of label files.
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML corpus spec; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every configured iteration, reusing up-to-date artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean and std of held-out PNMI over repeated k-means fits.
    Stability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
        ks: Vec<usize>,
        /// Fractions of the training utterances.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1")]
        sizes: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster every layer of a checkpoint.
    LayerSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100")]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One model per loss weight on masked frames.
    AlphaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,0.5,0")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One model per mask start probability.
    MaskSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.08,0.1")]
        probs: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-head training over several codebooks.
    Ensemble {
        #[arg(long)]
        config: PathBuf,
        /// Codebook sizes of a k-means ensemble.
        #[arg(long, value_delimiter = ',', conflicts_with = "pq")]
        ks: Vec<usize>,
        /// Product quantization subsets, e.g. `0-12;13-25;26-38`.
        #[arg(long)]
        pq: Option<String>,
        /// Codebook size per subset with --pq.
        #[arg(long, default_value_t = 100)]
        pq_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_partition(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|part| {
            let (a, b) = part.split_once('-').unwrap_or((part, part));
            let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
            if b < a {
                bail!("empty range {part:?}");
            }
            Ok((a..=b).collect())
        })
        .collect()
}

fn load_context(config: &Path) -> Result<RunContext> {
    let cfg = PipelineConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    Ok(RunContext::prepare(cfg)?)
}

fn require_phones(ctx: &RunContext) -> Result<&[maskunit::metrics::AlignmentLabels]> {
    match ctx.corpus.phones.as_deref() {
        Some(p) => Ok(p),
        None => bail!("this study needs a corpus with ground-truth phones"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features(FeaturesCmd::Mfcc {
            manifest,
            out_dir,
            splice,
        }) => {
            let written = mfcc_stage(&manifest, &out_dir, splice)?;
            info!("wrote {} feature files to {}", written.len(), out_dir.display());
        }
        Command::Cluster(ClusterCmd::Fit {
            features,
            k,
            batch_size,
            starts,
            subsample,
            max_batches,
            method,
            seed,
            out,
        }) => {
            let fit = FitConfig {
                k,
                batch_size,
                n_starts: starts,
                max_batches,
                method: match method {
                    Method::Minibatch => FitMethod::MiniBatch,
                    Method::Lloyd => FitMethod::Lloyd,
                },
                seed,
                ..FitConfig::default()
            };
            let cb = cluster_fit_stage(&features, &ClusterFitOptions { fit, subsample }, &out)?;
            info!("wrote K={} codebook to {}", cb.k(), out.display());
        }
        Command::Cluster(ClusterCmd::Assign { codebook, features, out }) => {
            for p in cluster_assign_stage(&codebook, &features, &out)? {
                info!("wrote {}", p.display());
            }
        }
        Command::Train(a) => {
            let config = match &a.config {
                Some(p) => TrainStageConfig::load(p)?,
                None => TrainStageConfig::default(),
            };
            let overrides = TrainOverrides {
                alpha: a.alpha,
                steps: a.steps,
                seed: a.seed,
            };
            let model = train_stage(&a.manifest, &a.labels, &config, &overrides, &a.out)?;
            info!("trained {} steps, wrote {}", model.step, a.out.display());
        }
        Command::Extract(a) => {
            let written = extract_stage(&a.checkpoint, &a.manifest, a.layer, &a.out)?;
            info!("wrote {} layer-{} feature files", written.len(), a.layer);
        }
        Command::Metrics(a) => {
            let report = evaluate_files(&a.phones, &a.units)?;
            report.write_json(&a.report)?;
            println!(
                "phone purity {:.4}  cluster purity {:.4}  PNMI {:.4}",
                report.phone_purity, report.cluster_purity, report.pnmi
            );
        }
        Command::Synth(a) => {
            let mut spec = match &a.spec {
                Some(p) => SyntheticCorpusSpec::load(p)?,
                None => SyntheticCorpusSpec::default(),
            };
            if let Some(s) = a.sigma {
                spec.sigma = s;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let manifest = gen_synthetic_corpus(&spec)?.write(&a.out_dir)?;
            println!("{}", manifest.display());
        }
        Command::Pipeline(cmd) => run_pipeline_cmd(cmd)?,
    }
    Ok(())
}

fn run_pipeline_cmd(cmd: PipelineCmd) -> Result<()> {
    match cmd {
        PipelineCmd::Run { config } => {
            let ctx = load_context(&config)?;
            for i in 1..=ctx.config.iterations.len() {
                let out = ctx.run_iteration(i)?;
                match &out.metrics {
                    Some(m) => {
                        let probe = m
                            .probe
                            .as_ref()
                            .map(|p| format!("  layer {} PNMI {:.4}", p.layer, p.metrics.pnmi))
                            .unwrap_or_default();
                        println!(
                            "iteration {i}: teacher PNMI {:.4}  held-out masked acc {:.4}{probe}",
                            m.teacher.pnmi,
                            out.train.held_out.masked_accuracy.first().copied().unwrap_or(f64::NAN)
                        );
                    }
                    None => println!("iteration {i}: done ({})", out.dir.display()),
                }
            }
        }
        PipelineCmd::Stability {
            config,
            ks,
            sizes,
            trials,
            out,
        } => {
            let ctx = load_context(&config)?;
            let it = &ctx.config.iterations[0];
            let seed = derive_seed(ctx.config.seed, &["stability".into()]);
            let grid = stability_study(
                &ctx.corpus.features,
                require_phones(&ctx)?,
                &ctx.split,
                &ks,
                &sizes,
                trials,
                &it.clustering,
                seed,
            )?;
            for (i, k) in grid.ks.iter().enumerate() {
                for (j, s) in grid.train_sizes.iter().enumerate() {
                    println!("K={k:<5} size={s:<6} PNMI {:.4} ± {:.4}", grid.mean[i][j], grid.std[i][j]);
                }
            }
            write_json(&out, &grid)?;
        }
        PipelineCmd::LayerSweep {
            config,
            checkpoint: ckpt,
            ks,
            out,
        } => {
            let ctx = load_context(&config)?;
            let model = checkpoint::load(&ckpt)?;
            let inputs = ctx.corpus.model_inputs(model.config.input_mode)?;
            let it = &ctx.config.iterations[0];
            let seed = derive_seed(ctx.config.seed, &["layer-sweep".into()]);
            let rows = layer_sweep(
                &model,
                &inputs,
                require_phones(&ctx)?,
                &ctx.split,
                &ks,
                it.subsample,
                &it.clustering,
                seed,
            )?;
            for r in &rows {
                println!(
                    "layer {:>2} K={:<5} cluster purity {:.4}  phone purity {:.4}  PNMI {:.4}",
                    r.layer, r.k, r.cluster_purity, r.phone_purity, r.pnmi
                );
            }
            write_json(&out, &rows)?;
        }
        PipelineCmd::AlphaSweep { config, alphas, out } => {
            let ctx = load_context(&config)?;
            let reports = alpha_sweep(&ctx, &ctx.config.ablation, &alphas)?;
            for r in &reports {
                println!(
                    "alpha {:.2}: held-out masked acc {:.4}",
                    r.alpha,
                    r.held_out.masked_accuracy.first().copied().unwrap_or(f64::NAN)
                );
            }
            write_json(&out, &reports)?;
        }
        PipelineCmd::MaskSweep { config, probs, out } => {
            let ctx = load_context(&config)?;
            let reports = mask_prob_sweep(&ctx, &ctx.config.ablation, &probs)?;
            for r in &reports {
                println!(
                    "p {:.3}: held-out masked acc {:.4}",
                    r.mask_prob,
                    r.held_out.masked_accuracy.first().copied().unwrap_or(f64::NAN)
                );
            }
            write_json(&out, &reports)?;
        }
        PipelineCmd::Ensemble {
            config,
            ks,
            pq,
            pq_k,
            out,
        } => {
            let ctx = load_context(&config)?;
            let teacher = match pq {
                Some(s) => EnsembleTeacher::Product {
                    partition: parse_partition(&s)?,
                    k: pq_k,
                },
                None if !ks.is_empty() => EnsembleTeacher::Kmeans { ks },
                None => bail!("give --ks or --pq"),
            };
            let res = ensemble_run(&ctx, &teacher)?;
            println!(
                "{} heads, initial loss {:.4}, final loss {:?}",
                res.report.head_count, res.report.initial_loss, res.report.final_loss
            );
            write_json(&out, &res.report)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
