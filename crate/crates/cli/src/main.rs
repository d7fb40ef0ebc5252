fn main() {
    std::process::exit(ewc_lora_cli::run_cli(std::env::args_os()));
}
