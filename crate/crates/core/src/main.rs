fn main() {
    std::process::exit(metricformer::cli::main_entry(std::env::args_os()));
}
