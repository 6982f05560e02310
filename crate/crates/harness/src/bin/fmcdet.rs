use std::process;

fn main() {
    process::exit(fmc_harness::cli::run(std::env::args_os()));
}
