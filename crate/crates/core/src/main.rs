fn main() -> std::process::ExitCode {
    collabctx::cli::main_entry()
}
