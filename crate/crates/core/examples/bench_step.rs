use std::time::Instant;

use curriculum_mtl::model::{build_model, BackboneConfig, HeadOutputs};
use curriculum_mtl::nn::Feat;

fn main() {
    let shape = [32, 38, 32];
    let m = build_model(&BackboneConfig::tiny(shape), 0).unwrap();
    println!("params {}", m.parameter_count());
    for n in [1usize, 8] {
        let len: usize = shape.iter().product();
        let x = Feat::from_data(n, 1, shape, (0..n * len).map(|i| ((i as f32) * 0.37).sin()).collect());
        let d = HeadOutputs { age: vec![1.0; n], sex_logit: vec![1.0; n], dx_logit: vec![1.0; n] };
        let (mut fwd, mut step) = (f64::MAX, f64::MAX);
        for _ in 0..5 {
            let t = Instant::now();
            let _ = m.forward(&x).unwrap();
            fwd = fwd.min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            let (_, tape) = m.forward_train(&x).unwrap();
            let g = m.backward(&tape, &d);
            step = step.min(t.elapsed().as_secs_f64());
            assert!(g.is_finite());
        }
        println!("batch {n}: forward {:.1} ms, train step {:.1} ms (best of 5)", fwd * 1e3, step * 1e3);
    }
}
