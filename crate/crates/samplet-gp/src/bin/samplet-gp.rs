fn main() {
    std::process::exit(samplet_gp::cli::run_command(std::env::args_os()));
}
