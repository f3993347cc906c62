fn main() {
    std::process::exit(xlmk::cli::dispatch(std::env::args()));
}
