use clap::Parser;

fn main() {
    let args: Vec<_> = std::env::args_os().collect();
    let verbose = motionedit_cli::Cli::try_parse_from(&args).map(|c| c.verbose).unwrap_or(0);
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    std::process::exit(motionedit_cli::main_with(args));
}
