fn main() {
    std::process::exit(mpl_cli::main_with(std::env::args_os()));
}
