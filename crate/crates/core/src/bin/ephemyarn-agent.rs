//! Node agent; same as `ephemyarn agent`.

use clap::Parser;
use ephemyarn::cli::{agent, init_logging, AgentArgs};

#[derive(Parser)]
#[command(name = "ephemyarn-agent")]
struct Opts {
    #[command(flatten)]
    args: AgentArgs,
}

fn main() {
    init_logging();
    let code = match agent(Opts::parse().args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    std::process::exit(code);
}
