use clap::Parser;

fn main() {
    // Die quietly when a downstream pipe closes, like any line filter.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = hfan_cli::Cli::parse();
    if let Err(err) = hfan_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
