use std::io::{self, Write};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ARLLM_LOG", "info"))
        .target(env_logger::Target::Stderr)
        .init();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let code = arllm::cli::main_with_args(std::env::args_os(), &mut out, &mut io::stderr());
    let _ = out.flush();
    std::process::exit(code);
}
