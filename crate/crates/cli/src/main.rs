use clap::Parser;

fn main() {
    let cli = kvh_lab::Cli::parse();
    std::process::exit(kvh_lab::execute(&cli));
}
