fn main() {
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        // single-threaded kernels keep floating-point reductions reproducible
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(depthseg::cli::run(std::env::args_os()));
}
