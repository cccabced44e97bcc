fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    flowprior::cli::configure_threads();
    std::process::exit(flowprior::cli::run(std::env::args_os()));
}
