fn main() {
    std::process::exit(eqdiff_cli::main_with_args(std::env::args_os()));
}
