fn main() {
    std::process::exit(scicon::cli::dispatch(std::env::args_os()));
}
