fn main() -> std::process::ExitCode {
    kbqa_core::cli::main()
}
