fn main() {
    std::process::exit(stateformer_cli::run(std::env::args_os()));
}
