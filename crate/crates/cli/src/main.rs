use clap::Parser;
use pemvc_cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = pemvc_cli::run(cli) {
        eprintln!("pemvc: {e}");
        std::process::exit(e.exit_code());
    }
}
