use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtdbn::data::SyntheticSpec;
use mtdbn_cli::{
    cmd_embed, cmd_eval, cmd_finetune, cmd_generate, cmd_predict, cmd_pretrain, cmd_retrieve, CliError, RunConfig,
    FINETUNED, PRETRAINED,
};

#[derive(Parser)]
#[command(name = "mtdbn", version, about = "Multityped deep belief network pipeline")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layerwise unsupervised pretraining.
    Pretrain,
    /// Attach heads and train the whole net on its targets.
    Finetune {
        /// Defaults to the pretrained net in the output directory.
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Write one embedding row per instance.
    Embed {
        #[arg(long, conflicts_with = "baseline")]
        net: Option<PathBuf>,
        /// Unit-norm view concatenation instead of a net.
        #[arg(long)]
        baseline: bool,
    },
    /// Cosine retrieval among test rows, scored by MAP and NDCG.
    Retrieve {
        #[arg(long)]
        embeddings: PathBuf,
        /// Also write one CSV row per query.
        #[arg(long)]
        per_query: bool,
    },
    /// Predict a head's outputs for the test rows.
    Predict {
        #[arg(long)]
        head: String,
        #[arg(long, conflicts_with = "knn")]
        net: Option<PathBuf>,
        /// kNN baseline with K neighbors instead of a net.
        #[arg(long, value_name = "K")]
        knn: Option<usize>,
    },
    /// Score a multilabel predictions file against the dataset.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Write a synthetic planted-cluster corpus.
    Generate {
        /// Optional JSON corpus parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    Ok(RunConfig::load(path)?.seeded(cli.seed))
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.as_ref().map(|o| c.base_dir.join(o))))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    if let Command::Generate { spec } = &cli.command {
        let mut synthetic = match spec {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => SyntheticSpec::default(),
        };
        if let Some(seed) = cli.seed {
            synthetic.seed = seed;
        }
        let manifest = cmd_generate(&synthetic, &out_dir(cli, None))?;
        println!("{}", manifest.display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let out = out_dir(cli, Some(&cfg));
    let or_default = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
    match &cli.command {
        Command::Pretrain => {
            let done = cmd_pretrain(&cfg, &out)?;
            println!("{}", done.net_path.display());
        }
        Command::Finetune { net } => {
            let done = cmd_finetune(&cfg, &or_default(net, PRETRAINED), &out)?;
            if let (Some(first), Some(last)) = (done.trace.rows.first(), done.trace.rows.last()) {
                eprintln!("loss {:.6} -> {:.6}", first.total, last.total);
            }
            println!("{}", done.net_path.display());
        }
        Command::Embed { net, baseline } => {
            let net = (!baseline).then(|| or_default(net, FINETUNED));
            let path = cmd_embed(&cfg, net.as_deref(), *baseline, &out)?;
            println!("{}", path.display());
        }
        Command::Retrieve { embeddings, per_query } => {
            print!("{}", cmd_retrieve(&cfg, embeddings, *per_query, &out)?.to_table());
        }
        Command::Predict { head, net, knn } => {
            let net = knn.is_none().then(|| or_default(net, FINETUNED));
            let path = cmd_predict(&cfg, net.as_deref().map(Path::new), head, *knn, &out)?;
            println!("{}", path.display());
        }
        Command::Eval { predictions } => {
            print!("{}", cmd_eval(&cfg, predictions, &out)?.to_table());
        }
        Command::Generate { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtdbn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
