use clap::Parser;

fn main() {
    let cli = iet_cli::Cli::parse();
    let outcome = iet_cli::execute(&cli);
    std::process::exit(iet_cli::finish(&cli, &outcome));
}
