fn main() {
    std::process::exit(longalign::cli::dispatch(std::env::args_os()));
}
