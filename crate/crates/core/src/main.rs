fn main() {
    gsan_core::cli::tune_allocator();
    std::process::exit(gsan_core::cli::run_from_args(std::env::args_os()));
}
