fn main() -> std::process::ExitCode {
    ktda::cli::main()
}
