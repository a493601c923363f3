use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match eclf_cli::run(std::env::args().collect()) {
        Err(usage) => usage.exit(),
        Ok(Ok(outcome)) => {
            println!("{}", outcome.run_dir.display());
            for a in &outcome.artifacts {
                log::info!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
