fn main() -> std::process::ExitCode {
    stopeval::cli::main_entry()
}
