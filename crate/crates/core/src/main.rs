fn main() {
    std::process::exit(cohort_mil::cli::run(std::env::args_os()));
}
