use pmpcr::apps::{main_with, Ring};

fn main() {
    std::process::exit(main_with(Ring::from_args));
}
