use std::process::exit;

fn main() {
    exit(gstrack_cli::run(std::env::args_os()));
}
