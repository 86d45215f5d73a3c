fn main() {
    let code = cfuseg::cli::run(std::env::args_os());
    std::process::exit(code);
}
