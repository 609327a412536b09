#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnforge_core::ann::{Checkpoint, CheckpointMeta};
use snnforge_core::network::{NetworkBuilder, NetworkSpec, Task};
use snnforge_core::tensor::Tensor;

pub fn meta(seed: u64) -> CheckpointMeta {
    CheckpointMeta { width_factor: 1.0, seed, epoch: 0, task: Task::Denoising }
}

pub fn inputs(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(0.0..1.0))).collect()
}

/// conv3x3(1->4) relu, conv3x3(4->4) relu, conv1x1(4->out) linear.
pub fn chain(out: usize, seed: u64) -> Checkpoint {
    let mut b = NetworkBuilder::new(1);
    let a = b.conv("a", 0, 4, 3, true);
    let c = b.conv("b", a, 4, 3, true);
    b.conv("out", c, out, 1, false);
    let mut ck = Checkpoint::init(b.finish().unwrap(), meta(seed)).unwrap();
    // Small positive biases keep most units active.
    for p in ck.params.values_mut() {
        p.bias.data_mut().iter_mut().for_each(|v| *v = 0.05);
    }
    ck
}

/// Two parallel branches of very different scale concatenated into one layer.
pub fn skip_disparity(seed: u64) -> (Checkpoint, usize) {
    let mut b = NetworkBuilder::new(1);
    let big = b.conv("big", 0, 2, 3, true);
    let small = b.conv("small", 0, 2, 3, true);
    let cat = b.concat("cat", big, small);
    let post = b.conv("post", cat, 4, 3, true);
    b.conv("out", post, 1, 1, false);
    let spec: NetworkSpec = b.finish().unwrap();
    let mut ck = Checkpoint::init(spec, meta(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (id, scale) in [(big, 8.0), (small, 0.25)] {
        let p = ck.params.get_mut(&id).unwrap();
        p.kernel.data_mut().iter_mut().for_each(|v| *v = v.abs() * scale);
        p.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let p = ck.params.get_mut(&post).unwrap();
    p.kernel.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..1.0));
    (ck, post)
}
