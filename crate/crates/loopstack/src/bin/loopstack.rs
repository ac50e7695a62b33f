fn main() {
    std::process::exit(loopstack::cli::run_cli());
}
