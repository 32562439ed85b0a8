fn main() {
    std::process::exit(receptive_graph::cli::run(std::env::args_os()));
}
