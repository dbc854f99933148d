fn main() {
    std::process::exit(ditune::dispatch(std::env::args_os()));
}
