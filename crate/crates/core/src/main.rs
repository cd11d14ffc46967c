fn main() {
    std::process::exit(mpsae::cli::main_entry());
}
