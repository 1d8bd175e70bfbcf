fn main() {
    std::process::exit(peft_debias::cli::main(std::env::args_os()));
}
