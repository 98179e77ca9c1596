fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = verikit::cli::run(std::env::args_os());
    std::process::exit(code);
}
