use std::time::Instant;
use tentnet::rng::XorShiftRng;
use tentnet::tensor::Tensor;
use tentnet::nn::conv::{conv2d_forward, conv2d_backward};

fn main() {
    let mut rng = XorShiftRng::new(2);
    // conv2-like: [100,32,26,26] x [32,32,3,3]
    let x: Vec<f32> = (0..100*32*26*26).map(|_| rng.next_f32()).collect();
    let x = Tensor::from_vec(vec![100,32,26,26], x).unwrap();
    let w: Vec<f32> = (0..32*32*9).map(|_| rng.uniform(-0.1,0.1)).collect();
    let w = Tensor::from_vec(vec![32,32,3,3], w).unwrap();
    let b = Tensor::zeros(vec![32]);
    let _ = conv2d_forward(&x, &w, &b).unwrap();
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps { let _ = conv2d_forward(&x, &w, &b).unwrap(); }
    let fwd = t0.elapsed().as_secs_f64()/reps as f64;
    let flop = 100.0*24.0*24.0*32.0*288.0*2.0;
    println!("conv2 fwd: {:.1} ms  {:.1} GF/s", fwd*1e3, flop/fwd/1e9);

    let dy: Vec<f32> = (0..100*32*24*24).map(|_| rng.uniform(-0.1,0.1)).collect();
    let dy = Tensor::from_vec(vec![100,32,24,24], dy).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps { let _ = conv2d_backward(&x, &w, &dy, true).unwrap(); }
    let bwd = t0.elapsed().as_secs_f64()/reps as f64;
    println!("conv2 bwd(full): {:.1} ms", bwd*1e3);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = conv2d_backward(&x, &w, &dy, false).unwrap(); }
    let bwdi = t0.elapsed().as_secs_f64()/reps as f64;
    println!("conv2 bwd(input-only): {:.1} ms", bwdi*1e3);

    // conv4-like: [100,64,10,10] x [64,64,3,3]
    let x4: Vec<f32> = (0..100*64*10*10).map(|_| rng.next_f32()).collect();
    let x4 = Tensor::from_vec(vec![100,64,10,10], x4).unwrap();
    let w4: Vec<f32> = (0..64*64*9).map(|_| rng.uniform(-0.1,0.1)).collect();
    let w4 = Tensor::from_vec(vec![64,64,3,3], w4).unwrap();
    let b4 = Tensor::zeros(vec![64]);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = conv2d_forward(&x4, &w4, &b4).unwrap(); }
    let fwd4 = t0.elapsed().as_secs_f64()/reps as f64;
    let flop4 = 100.0*8.0*8.0*64.0*576.0*2.0;
    println!("conv4 fwd: {:.1} ms  {:.1} GF/s", fwd4*1e3, flop4/fwd4/1e9);

    // big raw gemm test [32x288]x[288x57600]
    let a: Vec<f32> = (0..32*288).map(|_| rng.uniform(-1.0,1.0)).collect();
    let a = Tensor::from_vec(vec![32,288], a).unwrap();
    let bb: Vec<f32> = (0..288*5760).map(|_| rng.uniform(-1.0,1.0)).collect();
    let bb = Tensor::from_vec(vec![288,5760], bb).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps { let _ = tentnet::tensor::matmul(&a, &bb).unwrap(); }
    let mm = t0.elapsed().as_secs_f64()/reps as f64;
    println!("raw gemm 32x288x5760: {:.1} ms  {:.1} GF/s", mm*1e3, 2.0*32.0*288.0*5760.0/mm/1e9);
}
