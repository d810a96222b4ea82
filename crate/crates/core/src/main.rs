fn main() -> std::process::ExitCode {
    fcdd_core::cli::main()
}
