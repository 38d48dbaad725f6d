fn main() {
    std::process::exit(ecpf::cli::run(std::env::args_os()));
}
