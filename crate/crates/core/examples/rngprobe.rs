use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    for stream in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(902);
        rng.set_stream(stream);
        let vals: Vec<u32> = (0..6).map(|_| rng.random_range(0..10000u32)).collect();
        println!("stream {stream}: {vals:?}");
    }
    // subset overlap, as corrupt() draws them
    let subset = |stream: u64| -> std::collections::BTreeSet<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(902);
        rng.set_stream(stream);
        let mut idx: Vec<usize> = (0..10000).collect();
        idx.partial_shuffle(&mut rng, 500);
        idx.into_iter().take(500).collect()
    };
    let a = subset(0);
    let b = subset(1);
    println!("overlap: {}", a.intersection(&b).count());
}
