use pmpcr::apps::{main_with, SelfSend};

fn main() {
    std::process::exit(main_with(SelfSend::from_args));
}
