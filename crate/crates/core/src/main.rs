fn main() {
    std::process::exit(habench::cli::main_from_env());
}
