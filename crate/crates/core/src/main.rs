fn main() {
    std::process::exit(softrep::cli::dispatch(std::env::args_os()));
}
