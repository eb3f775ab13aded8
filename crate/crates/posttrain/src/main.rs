//! `posttrain` command-line entry point.

fn main() {
    std::process::exit(posttrain::cli::main_with_args(std::env::args_os()));
}
