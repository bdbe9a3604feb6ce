fn main() {
    std::process::exit(penstock::io::cli::main(std::env::args_os()));
}
