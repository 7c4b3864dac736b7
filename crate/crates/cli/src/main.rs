fn main() {
    std::process::exit(cystseg_cli::run(std::env::args_os()));
}
