//! The reversal layer leaves values alone and flips the gradient.

use ndarray::{ArrayD, IxDyn};
use plda::autograd::Graph;
use plda::grl::{grl_apply, warmup_factor, GrlConfig};

fn main() -> plda::Result<()> {
    let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let cfg = GrlConfig { lambda: 0.5, warmup: false };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let r = grl_apply(&mut g, xv, &cfg)?;
    // L = sum(r^2), so dL/dr = 2r and dL/dx = -lambda * 2x
    let sq = g.mul(r, r);
    let loss = g.sum(sq);
    let grads = g.backward(loss);
    println!("forward  {:?}", g.value(r).as_slice().unwrap());
    println!("gradient {:?}", grads.get(xv).unwrap().as_slice().unwrap());

    for p in [0.0, 0.1, 0.25, 0.5, 1.0] {
        println!("ramp at progress {p:.2}: {:.4}", warmup_factor(p));
    }
    Ok(())
}
