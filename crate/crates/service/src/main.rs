use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sketchguide_service::config::Overrides;
use sketchguide_service::generate::{self, GenerateArgs};
use sketchguide_service::server;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "sketchguide", version, about = "Real-time drawing guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the WebSocket service.
    Serve {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
        /// Where session logs and round outputs are stored.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Generate guidance for sketches without a server.
    Generate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        style: Option<String>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Sketch PNGs, processed in order as successive strokes.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve {
            overrides,
            listen,
            data_dir,
        } => {
            let mut config = overrides.resolve()?;
            if let Some(l) = listen {
                config.listen = l;
            }
            if let Some(d) = data_dir {
                config.data_dir = d;
            }
            tokio::runtime::Runtime::new()?.block_on(server::serve(config))
        }
        Command::Generate {
            overrides,
            prompt,
            style,
            out,
            inputs,
        } => {
            let config = overrides.resolve()?;
            let reports = generate::run(&config, &GenerateArgs { inputs, prompt, style, out })?;
            for r in reports {
                println!("{r}");
            }
            Ok(())
        }
    }
}
