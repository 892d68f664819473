use std::env;

fn main() {
    if let Ok(threads) = env::var("SSDECONV_THREADS") {
        if let Ok(count) = threads.parse::<usize>() {
            if count >= 1 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(count)
                    .build_global()
                    .ok();
            }
        }
    }
    let args: Vec<String> = env::args().skip(1).collect();
    std::process::exit(ssdeconv::cli::run_cli(args));
}
