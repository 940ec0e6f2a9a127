fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIMULST_LOG", "info")).init();
    std::process::exit(simulst::cli::run(std::env::args_os()));
}
