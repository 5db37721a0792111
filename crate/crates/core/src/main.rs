fn main() {
    std::process::exit(mambavf::cli::dispatch(std::env::args_os()));
}
