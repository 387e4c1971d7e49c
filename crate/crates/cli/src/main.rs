fn main() {
    std::process::exit(facegeom_cli::main_with_args(std::env::args_os()));
}
