use std::time::Instant;

use reserving::net::{Network, NetworkConfig};
use reserving::preprocess::{encode, EncodingContext, EncodingOptions};
use reserving::synthgen::{generate, GeneratorConfig};
use reserving::train::{fit, OptimizerConfig};

fn main() {
    let files: usize = std::env::args().nth(1).map_or(5000, |s| s.parse().unwrap());
    let hidden: usize = std::env::args().nth(2).map_or(64, |s| s.parse().unwrap());
    let (p, _) = generate(&GeneratorConfig::desk(files as f64, 1)).unwrap();
    let ctx = EncodingContext::fit(&p.schema, &p.files, p.n, EncodingOptions::default()).unwrap();
    let batch = encode(&p.files, &ctx);
    let net = Network::new(NetworkConfig::for_encoding(&ctx, 32, hidden, 1)).unwrap();
    let opt = OptimizerConfig { batch_size: 512, max_epochs: 1, ..Default::default() };
    let t = Instant::now();
    fit(net, &batch, &batch, 1.0, &opt).unwrap();
    println!("{} files, hidden {hidden}: {:.2}s per epoch (incl. validation)", batch.size, t.elapsed().as_secs_f64());
}
