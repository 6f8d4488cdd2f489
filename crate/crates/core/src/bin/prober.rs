use pmpcr::apps::{main_with, Prober};

fn main() {
    std::process::exit(main_with(Prober::from_args));
}
