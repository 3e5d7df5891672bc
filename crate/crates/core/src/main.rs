fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    std::process::exit(jeprest::cli::run_cli(std::env::args_os(), &mut out, &mut err));
}
