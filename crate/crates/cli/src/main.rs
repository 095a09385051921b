fn main() {
    std::process::exit(introprior_cli::run_command(std::env::args_os()));
}
