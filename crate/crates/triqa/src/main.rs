fn main() {
    std::process::exit(triqa::cli::run(std::env::args_os()));
}
