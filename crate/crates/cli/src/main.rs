use tost_core::alloc_track::CountingAllocator;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

fn main() {
    std::process::exit(tost_cli::run(std::env::args_os()));
}
