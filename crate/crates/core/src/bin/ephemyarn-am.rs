//! Application master; same as `ephemyarn am`.

use clap::Parser;
use ephemyarn::cli::{init_logging, AmArgs};

#[derive(Parser)]
#[command(name = "ephemyarn-am")]
struct Opts {
    #[command(flatten)]
    args: AmArgs,
}

fn main() {
    init_logging();
    std::process::exit(ephemyarn::app_master::am_main(&Opts::parse().args.job));
}
