fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PERFIELD_LOG", "warn")).init();
    std::process::exit(perfield::cli::run(std::env::args_os()));
}
