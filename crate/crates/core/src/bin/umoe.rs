use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use umoe::analysis::{accumulate_layerwise, dump_attention_maps, ExpertTokenStats, Ranking, Sublayer};
use umoe::blocks::{grad_check, randomize_params, Model};
use umoe::config::{count_params, resolve_config, ModelConfig};
use umoe::mixing::check_equivalence;
use umoe::profiler::{compare, macs, ArchDescriptor};
use umoe::runtime::{
    generate, load_checkpoint, load_corpus, overfit_fixture, save_checkpoint, save_corpus, synthetic_corpus,
    train_with, TokenCorpus,
};
use umoe::{Result, UmoeError};

#[derive(Parser)]
#[command(name = "umoe", version, about = "Unified attention/FFN mixture-of-experts toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Preset name or config file path.
    #[arg(long, default_value = "tiny_test")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a corpus (or the synthetic fixture) and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-step metrics as JSON lines.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Greedy decoding from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated token ids.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        n_new: usize,
    },
    /// Vanilla, pre-mixing and post-mixing attention agreement on random shapes.
    CheckEquiv {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Finite-difference gradient check at 64-bit.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 12)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Std of the noise added to the initial parameters.
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
    },
    /// Analytical parameter counts per category.
    CountParams {
        #[command(flatten)]
        common: Common,
    },
    /// Per-operation MAC report.
    Profile {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        shape: CostShape,
        #[arg(long, value_enum, default_value_t = Like::None)]
        like: Like,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// MAC ratios of `--config` against `--baseline`.
    CompareCost {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "base_dense")]
        baseline: String,
        #[command(flatten)]
        shape: CostShape,
    },
    /// Top tokens per expert from routing over a corpus.
    AnalyzeRouting {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, value_enum, default_value_t = RankBy::Mass)]
        rank_by: RankBy,
        /// Include every (layer, sublayer, expert, token) cell.
        #[arg(long)]
        cells: bool,
    },
    /// Per-expert attention rows ranked by router score.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        /// Comma-separated token ids; defaults to the fixture's first context window.
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Query position; defaults to the last token.
        #[arg(long)]
        position: Option<usize>,
        #[arg(long, default_value_t = 8)]
        top_m: usize,
        /// Also write the heat-map grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the seeded synthetic corpus.
    MakeCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1024)]
        len: usize,
        #[arg(long, default_value_t = 128)]
        period: usize,
        /// Corpus file to write.
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Args, Clone)]
struct CostShape {
    #[arg(long, default_value_t = 1024)]
    seq_len: u64,
    #[arg(long, default_value_t = 4)]
    batch: u64,
}

#[derive(Args, Clone)]
struct ModelSource {
    /// Load this checkpoint instead of initializing from `--config` and `--seed`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Like {
    None,
    Moa,
    Switchhead,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankBy {
    Mass,
    Count,
}

fn emit_text(text: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn emit<S: Serialize>(value: &S, out: &Option<PathBuf>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    emit_text(&text, out)
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| UmoeError::InvalidConfig(format!("bad token id {t:?}")))
        })
        .collect()
}

fn load_model(common: &Common, src: &ModelSource) -> Result<Model<f32>> {
    match &src.checkpoint {
        Some(p) => load_checkpoint(p),
        None => Model::init(&resolve_config(&common.config)?, common.seed),
    }
}

fn corpus_for(cfg: &ModelConfig, path: &Option<PathBuf>, seed: u64) -> Result<TokenCorpus> {
    match path {
        Some(p) => load_corpus(p),
        None => overfit_fixture(cfg, seed),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            common,
            corpus,
            steps,
            checkpoint,
            metrics,
        } => {
            let cfg = resolve_config(&common.config)?;
            let corpus = corpus_for(&cfg, &corpus, common.seed)?;
            let mut lines = String::new();
            let outcome = train_with(&cfg, &corpus, steps, common.seed, |m| {
                lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
                lines.push('\n');
            })?;
            if let Some(p) = metrics {
                fs::write(p, &lines)?;
            }
            save_checkpoint(&outcome.model, &checkpoint)?;
            emit(
                &json!({
                    "steps": steps,
                    "corpus_tokens": corpus.len(),
                    "initial_ce": outcome.log.first().map(|m| m.ce),
                    "final_ce": outcome.log.last().map(|m| m.ce),
                    "final_aux": outcome.log.last().map(|m| m.aux),
                    "checkpoint": checkpoint,
                }),
                &common.out,
            )
        }
        Command::Generate {
            common,
            checkpoint,
            prompt,
            n_new,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let prompt = parse_ids(&prompt)?;
            let tokens = generate(&model, &prompt, n_new)?;
            emit(&json!({ "prompt": prompt, "tokens": tokens }), &common.out)
        }
        Command::CheckEquiv { common, trials } => emit(&check_equivalence(trials, common.seed)?, &common.out),
        Command::GradCheck {
            common,
            per_tensor,
            tolerance,
            scale,
        } => {
            let cfg = resolve_config(&common.config)?;
            let mut model = Model::<f64>::init(&cfg, common.seed)?;
            randomize_params(&mut model, scale, common.seed.wrapping_add(1));
            let n = cfg.context_len.min(8);
            let ids: Vec<u32> = (0..=n).map(|i| ((i * 37 + 11) % cfg.vocab_size) as u32).collect();
            let report = grad_check(&model, &ids[..n], &ids[1..], per_tensor, tolerance, common.seed)?;
            emit(
                &json!({ "categories": report.categories(), "report": report }),
                &common.out,
            )
        }
        Command::CountParams { common } => {
            let cfg = resolve_config(&common.config)?;
            emit(
                &json!({ "config": common.config, "params": count_params(&cfg)? }),
                &common.out,
            )
        }
        Command::Profile {
            common,
            shape,
            like,
            format,
        } => {
            let cfg = resolve_config(&common.config)?;
            let name = common.config.clone();
            let desc = match like {
                Like::None => ArchDescriptor::from_config(name, &cfg, shape.seq_len, shape.batch),
                Like::Moa => ArchDescriptor::moa_like(name, &cfg, shape.seq_len, shape.batch),
                Like::Switchhead => ArchDescriptor::switchhead_like(name, &cfg, shape.seq_len, shape.batch),
            };
            let report = macs(&desc)?;
            match format {
                Format::Json => emit(&report, &common.out),
                Format::Table => emit_text(&report.to_table(), &common.out),
            }
        }
        Command::CompareCost {
            common,
            baseline,
            shape,
        } => {
            let a = ArchDescriptor::from_config(&baseline, &resolve_config(&baseline)?, shape.seq_len, shape.batch);
            let b = ArchDescriptor::from_config(
                &common.config,
                &resolve_config(&common.config)?,
                shape.seq_len,
                shape.batch,
            );
            emit(&compare(&a, &b)?, &common.out)
        }
        Command::AnalyzeRouting {
            common,
            model,
            corpus,
            top_k,
            rank_by,
            cells,
        } => {
            let model = load_model(&common, &model)?;
            let corpus = corpus_for(&model.cfg, &corpus, common.seed)?;
            let ctx = model.cfg.context_len;
            let windows: Vec<Vec<u32>> = corpus.ids.chunks(ctx).map(<[u32]>::to_vec).collect();
            let traces = model.forward_batch(&windows)?;
            let mut stats = ExpertTokenStats::new();
            for (tr, w) in traces.iter().zip(&windows) {
                stats.record(tr, w)?;
            }
            let ranking = match rank_by {
                RankBy::Mass => Ranking::Mass,
                RankBy::Count => Ranking::Count,
            };
            let mut experts = Vec::new();
            for l in 0..model.cfg.n_layers {
                for (sub, n) in [
                    (
                        Sublayer::Attn,
                        model.cfg.attn_is_moe().then(|| model.cfg.attn_experts()),
                    ),
                    (Sublayer::Ffn, model.cfg.ffn_is_moe().then(|| model.cfg.ffn_experts())),
                ] {
                    for e in 0..n.unwrap_or(0) {
                        match stats.top_tokens(l, sub, e, top_k, ranking) {
                            Ok(top) => experts.push(json!({
                                "layer": l, "sublayer": sub, "expert": e, "top_tokens": top,
                            })),
                            Err(UmoeError::UnknownExpert { .. }) => {}
                            Err(err) => return Err(err),
                        }
                    }
                }
            }
            let mut report = json!({
                "windows": windows.len(),
                "tokens": corpus.len(),
                "ranking": match ranking { Ranking::Mass => "mass", Ranking::Count => "count" },
                "experts": experts,
            });
            if cells {
                report["cells"] = json!(stats.cells());
            }
            emit(&report, &common.out)
        }
        Command::DumpAttn {
            common,
            model,
            tokens,
            layer,
            position,
            top_m,
            csv,
        } => {
            let model = load_model(&common, &model)?;
            let tokens = match tokens {
                Some(s) => parse_ids(&s)?,
                None => {
                    let c = overfit_fixture(&model.cfg, common.seed)?;
                    c.ids[..model.cfg.context_len.min(c.len())].to_vec()
                }
            };
            let position = position.unwrap_or(tokens.len().saturating_sub(1));
            let dump = dump_attention_maps(&model, &tokens, layer, position, top_m)?;
            if let Some(p) = csv {
                fs::write(p, dump.to_csv()?)?;
            }
            let layerwise = accumulate_layerwise(&model, &tokens, position, top_m)?;
            emit(
                &json!({ "tokens": tokens, "dump": dump, "layerwise": layerwise }),
                &common.out,
            )
        }
        Command::MakeCorpus {
            common,
            len,
            period,
            corpus,
        } => {
            let cfg = resolve_config(&common.config)?;
            let c = synthetic_corpus(cfg.vocab_size, len, period, common.seed)?;
            save_corpus(&c, &corpus)?;
            emit(
                &json!({ "corpus": corpus, "tokens": c.len(), "vocab_size": c.vocab_size }),
                &common.out,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "Usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
