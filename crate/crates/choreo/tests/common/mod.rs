#![allow(dead_code)]

use choreo::RunConfig;

/// A pipeline small enough to run end to end in a few seconds.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    for s in [
        "data.styles=2",
        "data.clips_per_style=5",
        "data.frames=48",
        "data.test_fraction=0.2",
        "data.seed=3",
        "encoder.N=1",
        "encoder.l=2",
        "encoder.d_z=8",
        "encoder.d_k=4",
        "encoder.d_v=4",
        "encoder.k=4",
        "encoder.ffn_hidden=8",
        "decoder.layers=1",
        "decoder.d_s=8",
        "curriculum.lambda=0.5",
        "curriculum.q=4",
        "train.epochs=3",
        "train.batch=4",
        "train.lr=0.001",
        "train.seed=5",
        "metrics.samples=2",
        "metrics.num_pairs=10",
        "metrics.fid_window=1.0",
        "metrics.classifier.embed=8",
        "metrics.classifier.hidden=4",
        "metrics.classifier.epochs=20",
    ] {
        c.set(s).unwrap();
    }
    c
}
