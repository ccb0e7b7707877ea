fn main() {
    std::process::exit(evln::report::cli::run_cli(std::env::args_os()));
}
