use std::process::ExitCode;

fn main() -> ExitCode {
    let result = cxr_cli::run(std::env::args_os());
    if result.code == 0 {
        if !result.summary.is_empty() {
            print!("{}", result.summary);
        }
    } else {
        eprint!("{}", result.summary);
    }
    ExitCode::from(result.code)
}
