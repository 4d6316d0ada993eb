fn main() -> std::process::ExitCode {
    expertforge::cli::main()
}
