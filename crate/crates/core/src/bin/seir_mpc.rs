fn main() {
    std::process::exit(seir_mpc::experiments::cli_dispatch(std::env::args_os()));
}
