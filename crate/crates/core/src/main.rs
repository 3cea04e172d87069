fn main() {
    std::process::exit(latelab::cli::dispatch(std::env::args_os()));
}
