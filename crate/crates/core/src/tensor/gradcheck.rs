//! Finite-difference gradient checking.
//!
//! Central differences with a value-scaled step; the relative error uses
//! `max(|analytic|, |numeric|, 1e-6)` as denominator so near-zero gradients
//! do not blow up the ratio.

use super::{Arr, Graph, Var};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How many coordinates to probe per input and the sampling seed.
#[derive(Clone, Copy, Debug)]
pub struct GradSpec {
    pub coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradSpec {
    fn default() -> Self {
        Self {
            coords_per_input: 20,
            seed: 0,
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Check gradients of `f` (a pure scalar function of the inputs) against the
/// supplied analytic gradients on randomly sampled coordinates.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[Arr]) -> f64,
    inputs: &[Arr],
    analytic: &[Arr],
    spec: GradSpec,
) -> GradCheckReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        if n == 0 {
            continue;
        }
        for _ in 0..spec.coords_per_input {
            let coord = rng.random_range(0..n);
            let x0 = input.as_slice().expect("standard layout")[coord];
            let h = 1e-5 * x0.abs().max(1.0);
            let mut work: Vec<Arr> = inputs.to_vec();
            work[idx].as_slice_mut().unwrap()[coord] = x0 + h;
            let fp = f(&work);
            work[idx].as_slice_mut().unwrap()[coord] = x0 - h;
            let fm = f(&work);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[idx].as_slice().expect("standard layout")[coord];
            max_rel = max_rel.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    }
}

/// Convenience wrapper for graph-building closures: leaves are created for
/// every input, the closure produces a scalar output, and the analytic
/// gradients come from one backward pass.
pub fn check_graph_gradients<F>(build: F, inputs: &[Arr], spec: GradSpec) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Arr> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Arr::zeros(x.raw_dim()))
        })
        .collect();

    let mut eval = |xs: &[Arr]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = build(&mut g, &vars).expect("forward failed during finite differences");
        g.value(out).iter().next().copied().expect("scalar output")
    };
    Ok(finite_difference_check(&mut eval, inputs, &analytic, spec))
}
