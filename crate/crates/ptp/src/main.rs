fn main() {
    let seed = std::env::var("PTP_SEED").ok();
    std::process::exit(ptp::cli::run(std::env::args_os(), seed.as_deref()));
}
