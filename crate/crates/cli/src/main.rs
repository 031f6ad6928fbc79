use clap::Parser;

fn main() {
    let cli = skrefine_cli::Cli::parse();
    let code = skrefine_cli::run(cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
