use std::time::Instant;
use tentnet::nn::{build_mnist_net, model_forward, model_backward, model_backward_input, softmax_cross_entropy, Activation, Mode};
use tentnet::rng::XorShiftRng;
use tentnet::tensor::Tensor;

fn main() {
    let mut g = build_mnist_net(Activation::Relu, true);
    g.init_weights(1);
    let mut rng = XorShiftRng::new(2);
    let n = 100;
    let data: Vec<f32> = (0..n * 784).map(|_| rng.next_f32()).collect();
    let batch = Tensor::from_vec(vec![n, 1, 28, 28], data).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();

    let (logits, trace) = model_forward(&mut g, &batch, Mode::Train, 0).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
    let _ = model_backward(&g, &trace, &dlogits).unwrap();

    let t0 = Instant::now();
    let reps = 10;
    for r in 0..reps {
        let (logits, trace) = model_forward(&mut g, &batch, Mode::Train, r).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
        let _ = model_backward(&g, &trace, &dlogits).unwrap();
    }
    let train_step = t0.elapsed().as_secs_f64() / reps as f64;
    println!("train step (fwd+full bwd, batch {n}): {:.1} ms", train_step * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let (logits, trace) = tentnet::nn::model_forward_eval(&g, &batch).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
        let _ = model_backward_input(&g, &trace, &dlogits).unwrap();
    }
    let pgd_iter = t0.elapsed().as_secs_f64() / reps as f64;
    println!("attack iter (fwd+input bwd, batch {n}): {:.1} ms", pgd_iter * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = tentnet::nn::model_forward_eval(&g, &batch).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("eval forward (batch {n}): {:.1} ms", fwd * 1e3);

    println!("regular epoch (55k):   {:.1} s", 550.0 * train_step);
    println!("adversarial epoch:     {:.1} s", 550.0 * (train_step + 40.0 * pgd_iter));
    println!("PGD-100 on 1000:       {:.1} s", 10.0 * 100.0 * pgd_iter);
}
