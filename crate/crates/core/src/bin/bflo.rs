fn main() {
    std::process::exit(bflo::cli::cli_main(std::env::args_os()));
}
