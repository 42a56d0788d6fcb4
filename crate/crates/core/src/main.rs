fn main() {
    std::process::exit(soc_dual::harness::cli_main(std::env::args_os()));
}
