fn main() {
    std::process::exit(cloze_forge_cli::run(std::env::args()));
}
