fn main() {
    maskdiff::tune_allocator();
    std::process::exit(maskdiff::cli::main_with_args(std::env::args_os()));
}
