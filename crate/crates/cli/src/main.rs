fn main() {
    std::process::exit(pottsmg_cli::run(std::env::args_os()));
}
