fn main() -> std::process::ExitCode {
    blurrep::cli::main()
}
