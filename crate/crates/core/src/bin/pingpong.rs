use pmpcr::apps::{main_with, PingPong};

fn main() {
    std::process::exit(main_with(PingPong::from_args));
}
