//! One SGE forward and backward pass on a random feature map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sge::{sge_backward, sge_forward, similarity_decomposition, FeatureMap, SgeParams, Shape};

fn main() -> sge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = Shape::new(2, 16, 6, 6)?;
    let x = FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(-1.0f32..1.0));
    let params = SgeParams::<f32>::new(4, 1.0, 0.0);

    let (y, cache) = sge_forward(&x, &params)?;
    let gate = cache.gate_of(0, 0);
    let (lo, hi) = gate.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    println!("input {shape}, groups {}", params.groups);
    println!("sample 0 group 0 gate range [{lo:.4}, {hi:.4}]");

    // Decomposition c_i = |g| |x_i| cos(theta_i) for the first few positions
    for r in similarity_decomposition(&cache, 0, 0)?.iter().take(3) {
        println!(
            "|g|={:.4} |x|={:.4} cos={:+.4} c={:+.5}",
            r.g_norm,
            r.x_norm,
            r.cos_theta,
            r.product()
        );
    }

    // Loss = sum(y), so the upstream gradient is all ones
    let ones = FeatureMap::from_fn(y.shape(), |_, _, _, _| 1.0f32);
    let grads = sge_backward(&cache, &ones, &params)?;
    let norm: f32 = grads.d_input.as_slice().iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("|d_input| = {norm:.5}");
    println!("d_gamma = {:?}", grads.d_gamma);
    println!("d_beta  = {:?}", grads.d_beta);
    Ok(())
}
