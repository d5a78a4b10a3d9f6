use std::process::ExitCode;

fn main() -> ExitCode {
    empathyear_service::cli::run(std::env::args_os()).into()
}
