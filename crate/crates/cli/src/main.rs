use clap::Parser;
use formation_cli::{exit, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            std::process::exit(exit::FAILURE);
        }
    }
    match run(&cli) {
        Ok(_) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
