use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deltaai::energy::{enumerate_exact, exact_sample, EnergyModel};
use deltaai::graph::{ChordalStructure, Imap, UndirectedGraph};
use deltaai::harness::{
    metric_mmd_linear, metric_nll, train_delta, train_em, train_gfn, write_metrics_csv, EmConfig,
    Evaluator, LatentSpec, Posterior, TrainConfig,
};
use deltaai::nn::{Checkpoint, MaeConfig};
use deltaai::sampler::{
    ancestral_sample, gibbs_chain, read_samples, write_samples, AmortizedSampler, Anneal, Policy,
};
use deltaai::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "deltaai",
    version,
    about = "Amortized samplers for sparse binary graphical models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chordal completion and a sampled P-map of an edge-list graph.
    Chordalize {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a random Ising model on an edge-list graph, a ladder or a grid.
    MakeModel {
        #[arg(long, conflicts_with_all = ["ladder", "grid"])]
        graph: Option<PathBuf>,
        /// Number of rungs of a ladder graph.
        #[arg(long, conflicts_with = "grid")]
        ladder: Option<usize>,
        /// Grid shape as `ROWSxCOLS`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a sampler and writes its checkpoint and metrics.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Scores against exact samples every `eval_period` steps (|V| ≤ 20).
        #[arg(long)]
        exact_eval: bool,
    },
    /// Draws samples from a checkpoint along an I-map of the model graph.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        imap_seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NLL of reference samples and MMD² between them and sampler draws.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference samples; exact samples are drawn when omitted.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        imap_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gibbs chains with an optional linear anneal in inverse temperature.
    Gibbs {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        chains: usize,
        /// Full sweeps per chain.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        anneal_start: f64,
        #[arg(long, default_value_t = 0)]
        anneal_sweeps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact log Z, entropy and marginals by enumeration.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        /// Also writes this many exact samples.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variational EM of a Bayesian network with latent variables.
    Em {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated latent variable indices.
        #[arg(long, value_delimiter = ',')]
        latent: Vec<usize>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        em_config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Uses the exact posterior instead of an amortized one.
        #[arg(long)]
        exact_posterior: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output(path: &Option<PathBuf>) -> deltaai::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(path: &Path, seed: Option<u64>) -> deltaai::Result<TrainConfig> {
    let mut cfg = TrainConfig::from_json(&fs::read_to_string(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_sampler(path: &Path, m: &EnergyModel) -> deltaai::Result<AmortizedSampler> {
    let ck = Checkpoint::load(path)?;
    if ck.config.num_vars != m.num_vars() {
        return Err(Error::ShapeMismatch {
            expected: m.num_vars(),
            got: ck.config.num_vars,
        });
    }
    let mut s = AmortizedSampler::zeroed(ck.config)?;
    s.params = ck.params;
    Ok(s)
}

fn model_imap(m: &EnergyModel, seed: u64) -> Imap {
    ChordalStructure::new(m.graph(), seed).sample_imap(seed.wrapping_add(1))
}

fn arcs(imap: &Imap) -> Vec<[usize; 2]> {
    imap.dag.arcs.iter().map(|&(a, b)| [a, b]).collect()
}

fn run(cli: Cli) -> deltaai::Result<()> {
    match cli.command {
        Command::Chordalize { graph, seed } => {
            let g = UndirectedGraph::parse_edge_list(&fs::read_to_string(graph)?)?;
            let cs = ChordalStructure::new(&g, seed);
            let imap = cs.sample_imap(seed.wrapping_add(1));
            let report = json!({
                "fill_edges": cs.fill_edges(),
                "cliques": cs.junction_tree.cliques,
                "order": imap.order(),
                "arcs": arcs(&imap),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::MakeModel {
            graph,
            ladder,
            grid,
            sigma,
            seed,
            out,
        } => {
            let g = match (graph, ladder, grid) {
                (Some(p), _, _) => UndirectedGraph::parse_edge_list(&fs::read_to_string(p)?)?,
                (_, Some(r), _) => UndirectedGraph::ladder(r),
                (_, _, Some(shape)) => {
                    let dims: Vec<usize> = shape
                        .split('x')
                        .map(|t| {
                            t.parse()
                                .map_err(|_| Error::Config(format!("bad grid shape {shape:?}")))
                        })
                        .collect::<deltaai::Result<_>>()?;
                    match dims[..] {
                        [r, c] => UndirectedGraph::grid(r, c),
                        _ => return Err(Error::Config(format!("bad grid shape {shape:?}"))),
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "one of --graph, --ladder or --grid is required".into(),
                    ))
                }
            };
            EnergyModel::random_ising(&g, sigma, seed)?.save(&out)?;
        }
        Command::Train {
            model,
            config,
            seed,
            checkpoint,
            metrics,
            exact_eval,
        } => {
            let cfg = load_config(&config, seed)?;
            let m = EnergyModel::load(&model)?;
            let mut s = cfg.build_sampler(m.num_vars())?;
            let eval = if exact_eval {
                let table = enumerate_exact(&m)?;
                Some(Evaluator::exact(&m, &table, 10_000, cfg.seed))
            } else {
                None
            };
            let report = if cfg.objective.is_gfn() {
                train_gfn(&cfg, &m, &mut s, eval.as_ref())?
            } else {
                train_delta(&cfg, &m, &mut s, eval.as_ref())?
            };
            let ck = Checkpoint {
                config: s.mae.config.clone(),
                params: s.params.clone(),
                optimizer: None,
            };
            ck.save(&checkpoint)?;
            if let Some(p) = metrics {
                write_metrics_csv(fs::File::create(p)?, &report.metrics)?;
            }
            if let Some(last) = report.metrics.last() {
                eprintln!(
                    "step {} loss {:.6} instantiated max {} log Z {:.4}",
                    last.step, last.loss, last.instantiated_max, report.log_z
                );
            }
        }
        Command::Sample {
            model,
            checkpoint,
            imap_seed,
            n,
            seed,
            out,
        } => {
            let m = EnergyModel::load(&model)?;
            let s = load_sampler(&checkpoint, &m)?;
            let imap = model_imap(&m, imap_seed);
            let xs: Vec<_> = ancestral_sample(&s, &imap, Policy::OnPolicy, n, seed)
                .into_iter()
                .map(|(x, _)| x)
                .collect();
            write_samples(output(&out)?, &xs)?;
        }
        Command::Eval {
            model,
            checkpoint,
            samples,
            n,
            imap_seed,
            seed,
        } => {
            let m = EnergyModel::load(&model)?;
            let s = load_sampler(&checkpoint, &m)?;
            let imap = model_imap(&m, imap_seed);
            let reference = match samples {
                Some(p) => read_samples(BufReader::new(fs::File::open(p)?))?,
                None => exact_sample(&enumerate_exact(&m)?, n, seed),
            };
            let drawn: Vec<_> =
                ancestral_sample(&s, &imap, Policy::OnPolicy, reference.len(), seed ^ 1)
                    .into_iter()
                    .map(|(x, _)| x)
                    .collect();
            let report = json!({
                "nll": metric_nll(&s, &imap, &reference)?,
                "mmd2": metric_mmd_linear(&drawn, &reference)?,
                "samples": reference.len(),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gibbs {
            model,
            chains,
            steps,
            anneal_start,
            anneal_sweeps,
            seed,
            out,
        } => {
            let m = EnergyModel::load(&model)?;
            let anneal = Anneal {
                start_beta: anneal_start,
                sweeps: anneal_sweeps,
            };
            let xs = gibbs_chain(&m, chains, steps, anneal, seed);
            write_samples(output(&out)?, &xs)?;
        }
        Command::Oracle {
            model,
            samples,
            seed,
            out,
        } => {
            let m = EnergyModel::load(&model)?;
            let table = enumerate_exact(&m)?;
            let report = json!({
                "log_z": table.log_z,
                "entropy": table.entropy(),
                "marginals": table.marginals,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(k) = samples {
                write_samples(output(&out)?, &exact_sample(&table, k, seed))?;
            }
        }
        Command::Em {
            model,
            data,
            latent,
            config,
            em_config,
            seed,
            exact_posterior,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let em: EmConfig = serde_json::from_str(&fs::read_to_string(em_config)?)
                .map_err(|e| Error::Config(e.to_string()))?;
            let mut m = EnergyModel::load(&model)?;
            let rows = read_samples(BufReader::new(fs::File::open(data)?))?;
            let spec = LatentSpec::new(&m, &latent, cfg.seed)?;
            let n = m.num_vars();
            let report = if exact_posterior {
                train_em(&cfg, &em, &mut m, &spec, &rows, Posterior::Exact)?
            } else {
                let net = MaeConfig::new(n)
                    .with_cond_dim(n)
                    .with_width(cfg.network.width)
                    .with_depth(cfg.network.depth)
                    .with_activation(cfg.network.activation);
                let mut s = AmortizedSampler::new(net, cfg.seed)?;
                train_em(
                    &cfg,
                    &em,
                    &mut m,
                    &spec,
                    &rows,
                    Posterior::Amortized(&mut s),
                )?
            };
            for (round, ll) in report.log_likelihood.iter().enumerate() {
                eprintln!("round {} log-likelihood {ll:.5}", round + 1);
            }
            m.save(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Parse(_) | Error::Json(_) => 2,
                Error::NonFiniteLoss(_) => 3,
                _ => 1,
            })
        }
    }
}
