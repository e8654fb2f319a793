fn main() {
    std::process::exit(gchoreo_cli::run(std::env::args_os().skip(1)));
}
