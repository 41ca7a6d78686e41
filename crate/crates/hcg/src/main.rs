fn main() {
    std::process::exit(hcg::cli::run(std::env::args_os()));
}
