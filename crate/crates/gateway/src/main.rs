fn main() -> std::process::ExitCode {
    erasure_gateway::cli::main()
}
