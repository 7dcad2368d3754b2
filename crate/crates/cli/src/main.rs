fn main() {
    std::process::exit(sieve_cli::run(std::env::args_os()));
}
