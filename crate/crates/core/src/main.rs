use clap::Parser;

use obbtext_core::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
