fn main() {
    std::process::exit(svrg_bench::cli::run(std::env::args_os()));
}
