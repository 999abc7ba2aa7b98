fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TMSNN_LOG", "info")).init();
    std::process::exit(tmsnn::cli::run(std::env::args_os()));
}
