use std::process::ExitCode;

fn main() -> ExitCode {
    mixup_geometry_cli::main_with_args(std::env::args_os())
}
