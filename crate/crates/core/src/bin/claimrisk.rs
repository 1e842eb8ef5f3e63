fn main() -> std::process::ExitCode {
    claimrisk::cli::main()
}
