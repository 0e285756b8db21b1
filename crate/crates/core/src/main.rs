fn main() {
    std::process::exit(kfac_pipe::cli::run());
}
