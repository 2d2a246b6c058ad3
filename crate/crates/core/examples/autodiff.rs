//! The autodiff core on its own: build a graph, backpropagate, and fit a
//! small logistic regression with Adam.
//!
//! `cargo run --release --example autodiff`

use mocdt::diffcore::{Adam, AdamConfig, Array, Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mocdt::Result<()> {
    // d/dx sum(tanh(x) * x) = tanh(x) + x * (1 - tanh²(x))
    let mut g = Graph::new();
    let x = g.leaf(Array::row(vec![-1.0, 0.5, 2.0]));
    let t = g.tanh(x)?;
    let y = g.mul(t, x)?;
    let s = g.sum(y)?;
    g.backward(s)?;
    println!("value {:.6}", g.value(s).item());
    println!("grad  {:?}", g.grad(x).unwrap().data());

    // two-class data separated by the line x0 + x1 = 0
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 200;
    let mut xs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        xs.extend([a, b]);
        labels.push(usize::from(a + b > 0.0));
    }
    let inputs = Array::matrix(n, 2, xs)?;

    let mut store = ParamStore::new();
    let w = store.add("w", Array::zeros(&[2, 2]));
    let b = store.add("b", Array::zeros(&[2]));
    let mut opt = Adam::new(AdamConfig::with_lr(0.1), &store);
    for step in 0..=100 {
        let (loss, grads) = {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(inputs.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let logits = g.affine(xv, wv, bv)?;
            let loss = g.cross_entropy_logits(logits, &labels)?;
            g.backward(loss)?;
            (g.value(loss).item(), g.param_grads())
        };
        opt.step(&mut store, &grads)?;
        if step % 25 == 0 {
            println!("step {step:3}: cross-entropy {loss:.4}");
        }
    }
    println!("weights {:?}", store.get(w).data());
    Ok(())
}
