fn main() {
    mtag::tune_allocator();
    std::process::exit(mtag::cli::run(std::env::args_os()));
}
