// Tape buffers are large and short-lived; the system allocator returns them
// to the kernel and page-faults them back on every evaluation.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(setcnf::cli::main_with_args(std::env::args_os()));
}
