use std::process::ExitCode;

fn main() -> ExitCode {
    let runtime = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("rca: cannot start runtime: {e}");
            return ExitCode::from(rca_cli::EXIT_UNAVAILABLE as u8);
        }
    };
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    let code = runtime.block_on(rca_cli::run(std::env::args_os(), rca_cli::Env::from_process(), &mut out, &mut err));
    ExitCode::from(code as u8)
}
