fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = mobirl_wire::worker_main(&args) {
        eprintln!("mobirl-worker: {e}");
        std::process::exit(2);
    }
}
