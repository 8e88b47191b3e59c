fn main() {
    std::process::exit(dfsos::cli::run(std::env::args_os()));
}
