fn main() {
    std::process::exit(phishbench::cli::dispatch(std::env::args_os()));
}
