//! Central finite-difference gradient checking, shared by the numeric tests
//! and the acceptance suite.
//!
//! The builder closure is re-invoked from scratch for every perturbed
//! evaluation, so saved forward state (softmax outputs, normalization
//! statistics) is always consistent with the perturbed inputs.

use crate::num::tape::{Id, Tape};

/// Compare analytic gradients against central differences for every element
/// of every input. `build` constructs the expression and returns a scalar
/// root. Relative error must stay below `tol` (denominator clamped at 1).
pub fn check_grads<F>(inputs: &[((usize, usize), Vec<f64>)], build: F, tol: f64)
where
    F: Fn(&mut Tape<f64>, &[Id]) -> Id,
{
    let mut tape = Tape::new();
    let ids: Vec<Id> = inputs
        .iter()
        .map(|((r, c), d)| tape.leaf(*r, *c, d.clone(), true).unwrap())
        .collect();
    let root = build(&mut tape, &ids);
    assert_eq!(tape.shape(root), (1, 1), "gradient check root must be scalar");
    let grads = tape.backward(root).unwrap();

    let h = 1e-5;
    for (li, ((r, c), data)) in inputs.iter().enumerate() {
        let analytic: Vec<f64> =
            grads.get(ids[li]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; r * c]);
        for e in 0..data.len() {
            let eval = |delta: f64| -> f64 {
                let mut t = Tape::new();
                let perturbed: Vec<Id> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, ((rr, cc), dd))| {
                        let mut d2 = dd.clone();
                        if k == li {
                            d2[e] += delta;
                        }
                        t.leaf(*rr, *cc, d2, true).unwrap()
                    })
                    .collect();
                let root = build(&mut t, &perturbed);
                t.item(root)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(
                rel < tol,
                "input {li} element {e}: analytic {a} vs numeric {numeric} (rel err {rel:.3e})"
            );
        }
    }
}

/// Gradient check for parameterized models: analytic gradients come from one
/// backward pass through `build`; numeric ones from central differences over
/// every scalar of every parameter in `store`. Parameters the graph never
/// touches must show a zero numeric derivative.
pub fn check_store_grads<F>(store: &crate::num::params::ParamStore<f64>, build: F, tol: f64)
where
    F: Fn(&mut crate::num::params::GraphCtx<'_, f64>) -> Id,
{
    use crate::num::params::GraphCtx;

    let mut ctx = GraphCtx::new(store, true);
    let root = build(&mut ctx);
    assert_eq!(ctx.tape.shape(root), (1, 1), "gradient check root must be scalar");
    let grads = ctx.tape.backward(root).unwrap();
    let named = ctx.harvest(&grads);

    let h = 1e-5;
    for (name, tensor) in store.iter() {
        let analytic = named.get(name).cloned().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        for e in 0..tensor.numel() {
            let eval = |delta: f64| -> f64 {
                let mut perturbed = store.clone();
                perturbed.get_mut(name).unwrap().data[e] += delta;
                let mut ctx = GraphCtx::new(&perturbed, false);
                let root = build(&mut ctx);
                ctx.tape.item(root)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(
                rel < tol,
                "param {name:?} element {e}: analytic {a} vs numeric {numeric} (rel err {rel:.3e})"
            );
        }
    }
}
