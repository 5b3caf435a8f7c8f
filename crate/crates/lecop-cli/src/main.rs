use clap::Parser;

use lecop_cli::cli::{Cli, Command};
use lecop_cli::commands;
use lecop_cli::config::PipelineConfig;

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            // First rendered line, reshaped into the uniform error format.
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: usage: {first}");
            return 1;
        }
    };

    let mut cfg = match PipelineConfig::load(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    cfg.apply_overrides(cli.threads, cli.seed, cli.strict, cli.skip_bad_rows);

    if cfg.threads > 0 {
        let built = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
        if let Err(e) = built {
            eprintln!("error: runtime: cannot configure {} threads: {e}", cfg.threads);
            return 3;
        }
    }

    let result = match &cli.command {
        Command::Stats => commands::cmd_stats(&cfg),
        Command::Prompts => commands::cmd_prompts(&cfg),
        Command::Graphs => commands::cmd_graphs(&cfg),
        Command::EmbedGraphs => commands::cmd_embed_graphs(&cfg),
        Command::FetchEmbeddings => commands::cmd_fetch_embeddings(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Evaluate { checkpoint } => commands::cmd_evaluate(&cfg, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
