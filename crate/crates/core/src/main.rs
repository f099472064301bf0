use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    // Let clap print help and version itself.
    if let Err(e) = <airex::cli::Cli as clap::Parser>::try_parse_from(std::iter::once("airex".to_string()).chain(args.iter().cloned())) {
        let code = if e.use_stderr() { 2 } else { 0 };
        let _ = e.print();
        return ExitCode::from(code);
    }
    match airex::cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(1)
        }
    }
}
