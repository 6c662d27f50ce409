//! Every example runs to completion.

#[path = "../examples/beam_search.rs"]
mod beam_search;
#[path = "../examples/latents.rs"]
mod latents;
#[path = "../examples/metrics.rs"]
mod metrics;
#[path = "../examples/polish.rs"]
mod polish;
#[path = "../examples/retrieval.rs"]
mod retrieval;
#[path = "../examples/train_checkpoint.rs"]
mod train_checkpoint;

#[test]
fn examples_run() {
    beam_search::main().unwrap();
    latents::main().unwrap();
    metrics::main().unwrap();
    polish::main().unwrap();
    retrieval::main().unwrap();
    train_checkpoint::main().unwrap();
}
