//! Central finite-difference checks of every primitive and of randomized
//! compositions.

use mocdt::diffcore::{Array, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compare analytic gradients of `f` against central differences for every
/// element of every input.
fn check<F>(inputs: &[Array], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new().checked(true);
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Array> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let eval = |perturbed: &[Array]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|a| g.constant(a.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };

    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < REL_TOL,
                "input {k} elem {i}: analytic {a} numeric {numeric} rel {rel}"
            );
        }
    }
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    // A fixed random projection so the loss depends on every output element.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_array(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn each_primitive_in_isolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_array(&mut rng, &[3, 4]);
    let b = rand_array(&mut rng, &[4, 2]);
    let c = rand_array(&mut rng, &[3, 4]);
    let v = rand_array(&mut rng, &[4]);

    check(&[a.clone(), b.clone()], |g, x| {
        let y = g.matmul(x[0], x[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone(), c.clone()], |g, x| {
        let y = g.add(x[0], x[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone(), v.clone()], |g, x| {
        let y = g.add(x[0], x[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone(), c.clone()], |g, x| {
        let y = g.mul(x[0], x[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone(), v.clone()], |g, x| {
        let y = g.sub(x[0], x[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone(), c.clone()], |g, x| {
        let y = g.concat(&[x[0], x[1], x[0]]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone()], |g, x| {
        let y = g.row_select(x[0], &[2, 0, 2, 1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone()], |g, x| {
        let y = g.tanh(x[0]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone()], |g, x| {
        let y = g.sigmoid(x[0]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone()], |g, x| {
        let y = g.softmax(x[0]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone(), v.clone(), v.clone()], |g, x| {
        let y = g.layer_norm(x[0], x[1], x[2]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone()], |g, x| g.cross_entropy_logits(x[0], &[3, 0, 1]).unwrap());
    check(&[a.clone()], |g, x| {
        let y = g.transpose(x[0]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone()], |g, x| {
        let y = g.slice_cols(x[0], 1, 2).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a.clone(), c.clone()], |g, x| {
        let y = g.concat_rows(&[x[0], x[1]]).unwrap();
        weighted_sum(g, y, 9)
    });
    check(&[a], |g, x| {
        let y = g.scale(x[0], -2.5).unwrap();
        g.mean(y).unwrap()
    });
}

/// One random primitive applied to a `[3, 4]` value, keeping the shape.
fn random_step(g: &mut Graph, rng: &mut ChaCha8Rng, pool: &mut Vec<Var>, extra: &[Var]) {
    let x = pool[rng.gen_range(0..pool.len())];
    let y = pool[rng.gen_range(0..pool.len())];
    let out = match rng.gen_range(0..11) {
        0 => g.add(x, y).unwrap(),
        1 => g.mul(x, y).unwrap(),
        2 => g.tanh(x).unwrap(),
        3 => g.sigmoid(x).unwrap(),
        4 => g.softmax(x).unwrap(),
        5 => g.layer_norm(x, extra[0], extra[1]).unwrap(),
        6 => g.matmul(x, extra[2]).unwrap(),
        7 => {
            let c = g.concat(&[x, y]).unwrap();
            g.slice_cols(c, 2, 4).unwrap()
        }
        8 => g.row_select(x, &[1, 2, 0]).unwrap(),
        9 => g.add(x, extra[0]).unwrap(),
        _ => {
            let t = g.transpose(x).unwrap();
            let t = g.scale(t, 0.7).unwrap();
            g.transpose(t).unwrap()
        }
    };
    pool.push(out);
}

#[test]
fn randomized_compositions_match_finite_differences() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs = vec![
            rand_array(&mut rng, &[3, 4]),
            rand_array(&mut rng, &[3, 4]),
            rand_array(&mut rng, &[4]),
            rand_array(&mut rng, &[4]),
            rand_array(&mut rng, &[4, 4]),
        ];
        let depth = 1 + (seed as usize % 6);
        let use_ce = seed % 2 == 0;
        check(&inputs, move |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool = vec![x[0], x[1]];
            for _ in 0..depth {
                random_step(g, &mut rng, &mut pool, &x[2..]);
            }
            let last = *pool.last().unwrap();
            if use_ce {
                g.cross_entropy_logits(last, &[0, 3, 2]).unwrap()
            } else {
                weighted_sum(g, last, seed)
            }
        });
    }
}
