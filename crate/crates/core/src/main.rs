fn main() {
    std::process::exit(neuroprune::harness::cli::run(std::env::args_os()));
}
