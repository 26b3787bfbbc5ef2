fn main() {
    std::process::exit(mnar_cluster::cli::run(std::env::args_os()));
}
