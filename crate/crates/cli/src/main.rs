use clap::Parser;

use recindial_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cli = Cli::parse();
    let outcome = cli.global.clone().with_env(|k| std::env::var(k).ok()).and_then(|g| {
        cli.global = g;
        run(cli)
    });
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
