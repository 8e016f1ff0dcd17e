fn main() {
    std::process::exit(memattr_cli::main_with_std());
}
