fn main() {
    std::process::exit(protoloop::cli::dispatch(std::env::args_os()));
}
