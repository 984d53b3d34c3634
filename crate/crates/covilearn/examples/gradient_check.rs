//! Verifies the tape gradients of every parameterized layer against central
//! finite differences.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use covilearn::tensor::autodiff::GradientTape;
use covilearn::tensor::ops::Padding;
use covilearn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixed {
    input: Tensor,
    kernel_bias: Tensor,
    beta: Tensor,
    mean: Tensor,
    var: Tensor,
    dense_bias: Tensor,
    target: Tensor,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn with_value(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Loss of a conv -> batchnorm -> relu -> pool -> dense -> softmax -> bce
/// chain, plus the tape gradients for the three probed parameters.
fn objective(
    kernel: &Tensor,
    gamma: &Tensor,
    weight: &Tensor,
    fixed: &Fixed,
) -> (f64, Vec<Tensor>) {
    let mut tape = GradientTape::new();
    let x = tape.constant(fixed.input.clone());
    let k = tape.parameter("kernel", kernel.clone());
    let kb = tape.constant(fixed.kernel_bias.clone());
    let conv = tape.conv2d(x, k, Some(kb), 1, Padding::Same).unwrap();
    let g = tape.parameter("gamma", gamma.clone());
    let beta = tape.constant(fixed.beta.clone());
    let mean = tape.constant(fixed.mean.clone());
    let var = tape.constant(fixed.var.clone());
    let bn = tape.batchnorm_infer(conv, g, beta, mean, var, 1e-5).unwrap();
    let act = tape.relu(bn);
    let pooled = tape.global_avg_pool(act).unwrap();
    let w = tape.parameter("weight", weight.clone());
    let wb = tape.constant(fixed.dense_bias.clone());
    let logits = tape.dense_affine(pooled, w, wb).unwrap();
    let probs = tape.softmax(logits).unwrap();
    let loss = tape.bce_loss(probs, fixed.target.clone()).unwrap();
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss).unwrap();
    (value, vec![grads["kernel"].clone(), grads["gamma"].clone(), grads["weight"].clone()])
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fixed = Fixed {
        input: random(&[2, 3, 6, 6], &mut rng),
        kernel_bias: random(&[4], &mut rng),
        beta: random(&[4], &mut rng),
        mean: random(&[4], &mut rng),
        var: Tensor::from_slice(&[0.5, 1.0, 1.5, 2.0]),
        dense_bias: random(&[2], &mut rng),
        target: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
    };
    let kernel = random(&[4, 3, 3, 3], &mut rng);
    let gamma = Tensor::from_slice(&[1.0, 0.9, 1.1, 1.0]);
    let weight = random(&[4, 2], &mut rng);

    let (loss, analytic) = objective(&kernel, &gamma, &weight, &fixed);
    println!("loss at the probe point: {loss:.6}");

    let h = 1e-3;
    let params: [(&str, &Tensor, &Tensor); 3] = [
        ("kernel", &kernel, &analytic[0]),
        ("gamma", &gamma, &analytic[1]),
        ("weight", &weight, &analytic[2]),
    ];
    for (name, tensor, grads) in params {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let i = rng.random_range(0..tensor.len());
            let probe = |v: f64| {
                let bumped = with_value(tensor, i, v);
                match name {
                    "kernel" => objective(&bumped, &gamma, &weight, &fixed).0,
                    "gamma" => objective(&kernel, &bumped, &weight, &fixed).0,
                    _ => objective(&kernel, &gamma, &bumped, &fixed).0,
                }
            };
            let orig = tensor.data()[i];
            let fd = (probe(orig + h) - probe(orig - h)) / (2.0 * h);
            let a = grads.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / denom);
        }
        println!("{name:>7}: worst relative error over 100 coordinates = {worst:.3e}");
        assert!(worst < 1e-4);
    }
    println!("all layer gradients agree with finite differences");
}
