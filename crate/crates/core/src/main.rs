fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let threads = std::env::var("FPANET_THREADS").ok().and_then(|v| v.parse().ok());
    fpanet::par::init_threads(threads);
    std::process::exit(fpanet::cli::run(std::env::args_os()));
}
