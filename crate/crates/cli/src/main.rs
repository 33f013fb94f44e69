use std::process::ExitCode;

fn main() -> ExitCode {
    let env_seed = std::env::var(toib_cli::SEED_ENV).ok();
    let code = toib_cli::run(std::env::args_os(), env_seed);
    ExitCode::from(code as u8)
}
