use std::time::Instant;

use ar2_core::{build_camnet, sgd_step, SgdState, Tape, Tensor, Trainable, WidthConfig};

fn main() {
    let mut model = build_camnet([3, 32, 32], 10, WidthConfig::desk(), 0).unwrap();
    let b = 64;
    let x = Tensor::from_fn([b, 3, 32, 32], |i| ((i * 7919) % 255) as f32 / 255.0);
    let labels: Vec<usize> = (0..b).map(|i| i % 10).collect();
    let names: Vec<String> = model.named_params().map(|(n, _)| n.to_string()).collect();
    let mut opt = SgdState::new(0.01, 0.9).unwrap();
    let t = Instant::now();
    let steps = 5;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::All);
        let xv = tape.constant(x.clone());
        let (logits, _) = model.forward_on_tape(&mut tape, &bound, xv).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        model.absorb_grads(&mut tape, &bound).unwrap();
        let mut params = model.params_mut(&names);
        sgd_step(&mut params, &mut opt).unwrap();
    }
    let dt = t.elapsed().as_secs_f64();
    println!("train: {:.2} ms/image", dt * 1000.0 / (steps * b) as f64);
    let t = Instant::now();
    for _ in 0..steps {
        model.forward(&x).unwrap();
    }
    let dt = t.elapsed().as_secs_f64();
    println!("infer: {:.2} ms/image", dt * 1000.0 / (steps * b) as f64);
}
