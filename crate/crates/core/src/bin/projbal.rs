fn main() {
    std::process::exit(projbal::cli::main_from_env());
}
