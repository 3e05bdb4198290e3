//! `findoc` command-line front end.
//!
//! Settings come from an optional JSON config file (`--config`), then from
//! flags. Any field without a dedicated flag can be set with
//! `--set key.path=value`; flags always win over the file.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 provider.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use findoc::http::UreqTransport;
use findoc::runner::{
    ask, bench, build_indices, read_predictions, rerun, run_ablation, run_datagen, run_ingest, run_stats,
    score_predictions, write_scores, BenchOptions, IngestRequest, RunConfig, RunnerError,
};

#[derive(Parser, Debug)]
#[command(
    name = "findoc",
    version,
    about = "Numerical question answering over long financial reports",
    after_help = "Every config field can be set with --set key.path=value, e.g. \
                  --set provider.temperature=0.2 --set agent.prompts.solving_user=... \
                  Run `findoc config` to print the effective configuration with all field names.\n\n\
                  Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 provider."
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set any config field, e.g. `--set agent.max_rounds=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory of page-delimited `.md` reports (paths.corpus).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// QA dataset in JSON lines (paths.dataset).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Root of the run tree (paths.output).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Where per-report indices live (paths.index_dir).
    #[arg(long, global = true)]
    index_dir: Option<PathBuf>,
    /// Persistent LLM response cache (paths.cache_dir).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Where EDGAR downloads go (paths.filings).
    #[arg(long, global = true)]
    filings_dir: Option<PathBuf>,
    /// agent | no_context | long_context | single_round_rag | fixed_budget_rag
    #[arg(long, global = true)]
    pipeline: Option<String>,
    /// http | scripted (backend.kind)
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Script file for the scripted backend (backend.script).
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Chat model id (provider.model).
    #[arg(long, global = true)]
    model: Option<String>,
    /// Chat-completions URL (provider.endpoint).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Prompt token budget (provider.max_input_tokens).
    #[arg(long, global = true)]
    max_input_tokens: Option<usize>,
    /// bm25 | tfidf | dense (agent.index)
    #[arg(long, global = true)]
    index_kind: Option<String>,
    /// Agent rounds before stopping (agent.max_rounds).
    #[arg(long, global = true)]
    max_rounds: Option<usize>,
    /// Units retrieved per agent round (agent.k_per_round).
    #[arg(long, global = true)]
    k_per_round: Option<usize>,
    /// Most units the agent may hold (agent.chunk_budget).
    #[arg(long, global = true)]
    chunk_budget: Option<usize>,
    /// k of the single-round RAG baseline.
    #[arg(long, global = true)]
    single_round_k: Option<usize>,
    /// k of the fixed-budget RAG baseline.
    #[arg(long, global = true)]
    fixed_budget_k: Option<usize>,
    /// Concurrent questions in `bench`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// EDGAR User-Agent: a name and contact e-mail (edgar.user_agent).
    #[arg(long, global = true)]
    user_agent: Option<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List and download filings from EDGAR, converting HTML into reports.
    Ingest {
        /// Ticker or CIK. Repeatable.
        #[arg(long = "company", required = true)]
        companies: Vec<String>,
        #[arg(long, default_value = "10-K")]
        form: String,
        #[arg(long)]
        from_year: i32,
        #[arg(long)]
        to_year: i32,
        /// Only download; do not write corpus reports.
        #[arg(long)]
        no_convert: bool,
    },
    /// Build the configured index for every corpus report.
    Index {
        /// Rebuild indices that already exist.
        #[arg(long)]
        rebuild: bool,
    },
    /// Answer one question about one report.
    Ask {
        /// Report id (file stem in the corpus directory).
        #[arg(long)]
        report: String,
        #[arg(long)]
        question: String,
    },
    /// Run the dataset through a pipeline and score it.
    Bench {
        /// Run directory name; a timestamp by default.
        #[arg(long)]
        run_id: Option<String>,
        /// Only the first N questions.
        #[arg(long)]
        limit: Option<usize>,
        /// Re-execute the run recorded in this manifest. Other settings are
        /// taken from the manifest.
        #[arg(long, value_name = "MANIFEST")]
        from_manifest: Option<PathBuf>,
    },
    /// Score a predictions file against the dataset.
    Score {
        /// JSON lines with `id` and `prediction`.
        #[arg(long)]
        predictions: PathBuf,
        /// Also write scores.jsonl and eval_report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate QA candidates and filter them into a dataset.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        /// Filter an existing candidates file instead of generating.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Corpus and dataset statistics as JSON.
    Stats {
        /// Skip the dataset; corpus statistics only.
        #[arg(long)]
        no_dataset: bool,
    },
    /// Page-level Recall@k under several chunk granularities, as JSON.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = findoc::retrieval::ABLATION_SIZES)]
        sizes: Vec<usize>,
        #[arg(long = "k", value_delimiter = ',', default_values_t = [5usize, 10, 15, 30])]
        k_values: Vec<usize>,
    },
    /// Print the effective configuration after file and flag overrides.
    Config,
}

fn flag_overrides(g: &GlobalArgs) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            out.push(format!("{key}={v}"));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| serde_json::Value::from(p.display().to_string()).to_string());
    let text = |s: &Option<String>| s.as_ref().map(|s| serde_json::Value::from(s.as_str()).to_string());
    push("paths.corpus", path(&g.corpus));
    push("paths.dataset", path(&g.dataset));
    push("paths.output", path(&g.output));
    push("paths.index_dir", path(&g.index_dir));
    push("paths.cache_dir", path(&g.cache_dir));
    push("paths.filings", path(&g.filings_dir));
    push("backend.script", path(&g.script));
    push("pipeline", text(&g.pipeline.as_ref().map(|p| p.replace('-', "_"))));
    push("backend.kind", text(&g.backend.as_ref().map(|b| b.to_ascii_lowercase())));
    push("provider.model", text(&g.model));
    push("provider.endpoint", text(&g.endpoint));
    push("provider.max_input_tokens", g.max_input_tokens.map(|v| v.to_string()));
    push("agent.index", text(&g.index_kind.as_ref().map(|k| k.to_ascii_lowercase())));
    push("agent.max_rounds", g.max_rounds.map(|v| v.to_string()));
    push("agent.k_per_round", g.k_per_round.map(|v| v.to_string()));
    push("agent.chunk_budget", g.chunk_budget.map(|v| v.to_string()));
    push("single_round_k", g.single_round_k.map(|v| v.to_string()));
    push("fixed_budget_k", g.fixed_budget_k.map(|v| v.to_string()));
    push("workers", g.workers.map(|v| v.to_string()));
    push("seed", g.seed.map(|v| v.to_string()));
    push("edgar.user_agent", text(&g.user_agent));
    out
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, RunnerError> {
    let base = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = g.overrides.clone();
    overrides.extend(flag_overrides(g));
    let config = base.with_overrides(&overrides)?;
    config.validate()?;
    Ok(config)
}

/// Output is often piped into `head` or `jq`; a closed pipe is not an error.
fn print_json(value: &impl serde::Serialize) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Config => print_json(&config),
        Command::Ingest {
            companies,
            form,
            from_year,
            to_year,
            no_convert,
        } => {
            let req = IngestRequest {
                companies,
                form_type: form,
                years: from_year..=to_year,
                convert: !no_convert,
            };
            let out = run_ingest(&config, Arc::new(UreqTransport::new()), &req)?;
            println!(
                "filings listed: {}, downloaded: {}, reports written: {}",
                out.filings.len(),
                out.downloaded.len(),
                out.reports.len()
            );
            for p in &out.reports {
                println!("  {}", p.display());
            }
            if let Some(first) = out.errors.into_iter().next() {
                return Err(first);
            }
        }
        Command::Index { rebuild } => {
            let written = build_indices(&config, rebuild)?;
            println!("{} index file(s) written to {}", written.len(), config.paths.index_dir.display());
        }
        Command::Ask { report, question } => {
            let out = ask(&config, &report, &question)?;
            println!("answer: {}", out.transcript.final_answer);
            println!("transcript: {}", out.transcript_path.display());
            if let Some(err) = out.transcript.error {
                return Err(RunnerError::Provider(err));
            }
        }
        Command::Bench {
            run_id,
            limit,
            from_manifest,
        } => {
            let out = match from_manifest {
                Some(m) => rerun(&m, run_id)?,
                None => bench(&config, &BenchOptions { run_id, limit })?,
            };
            println!("run: {}", out.run_dir.display());
            println!(
                "questions: {}  EM: {:.2}  tolerance: {:.2}  F1: {:.2}",
                out.questions, out.report.em, out.report.tol_acc, out.report.f1
            );
            let terms: Vec<String> = out.terminations.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("terminations: {}", terms.join(" "));
            if out.aborted == out.questions {
                return Err(RunnerError::Provider(format!(
                    "every question aborted; see the transcripts in {}",
                    out.run_dir.display()
                )));
            }
        }
        Command::Score { predictions, out } => {
            let preds = read_predictions(&predictions)?;
            let gold = findoc::corpus::read_dataset(&config.paths.dataset)?;
            let (scores, report) = score_predictions(&preds, &gold, &config.metrics)?;
            if let Some(dir) = out {
                write_scores(&dir, &scores, &report)?;
            }
            print_json(&report.to_json());
        }
        Command::Datagen { out, candidates } => {
            let result = run_datagen(&config, &out, candidates.as_deref())?;
            print_json(&result.stats.to_report_json());
            println!("dataset: {}", result.dataset_path.display());
        }
        Command::Stats { no_dataset } => print_json(&run_stats(&config, !no_dataset)?),
        Command::Ablate { sizes, k_values } => print_json(&run_ablation(&config, &sizes, &k_values)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_file_values() {
        let g = GlobalArgs {
            max_rounds: Some(2),
            pipeline: Some("single-round-rag".into()),
            corpus: Some("/data/corpus".into()),
            ..GlobalArgs::default()
        };
        let c = load_config(&g).unwrap();
        assert_eq!(c.agent.max_rounds, 2);
        assert_eq!(c.pipeline, findoc::runner::PipelineKind::SingleRoundRag);
        assert_eq!(c.paths.corpus, PathBuf::from("/data/corpus"));
    }

    #[test]
    fn bad_flag_value_is_config_error() {
        let g = GlobalArgs {
            pipeline: Some("graph".into()),
            ..GlobalArgs::default()
        };
        assert_eq!(load_config(&g).unwrap_err().exit_code(), 2);
    }
}
