use std::io::Write;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use silverweight::cli::{long_version, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} target={} {}",
                record.level().as_str().to_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
    let matches = Cli::command().long_version(&*Box::leak(long_version().into_boxed_str())).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(status) => {
            // A closed stdout (e.g. piped into `head`) is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{status}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("status=error error={:?}", format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
