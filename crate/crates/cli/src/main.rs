use clap::Parser;

use qsphere_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("qsphere {}: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
