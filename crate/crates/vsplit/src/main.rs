fn main() {
    std::process::exit(vsplit::cli::main_entry());
}
