//! Central-difference validation of tape gradients.

use super::tape::{Tape, Var};
use super::ParamStore;
use crate::error::Result;

/// Compare analytic gradients of a scalar-valued graph against central
/// differences with step `h`, over every coordinate of every trainable
/// parameter in `store`. Returns the maximum relative error
/// `|analytic - fd| / max(1, |analytic|)`.
///
/// `build` must be a pure function of the parameter values: any sampling it
/// does has to use fixed inputs captured outside.
pub fn finite_diff_check<F>(store: &mut ParamStore, h: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&Tape, &ParamStore) -> Result<Var>,
{
    assert!(h > 0.0, "finite_diff_check step must be positive");

    let tape = Tape::new();
    let loss = build(&tape, store)?;
    let grads = tape.backward(loss)?;

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(n, _)| n.clone())
        .collect();

    let mut max_rel = 0.0f64;
    for name in names {
        let len = store.value(&name)?.numel();
        for i in 0..len {
            let orig = store.value(&name)?.data()[i];

            let mut eval_at = |v: f64, store: &mut ParamStore| -> Result<f64> {
                let mut t = store.value(&name)?.clone();
                t.data_mut()[i] = v;
                store.set_value(&name, t)?;
                let tape = Tape::new();
                let loss = build(&tape, store)?;
                Ok(tape.item(loss))
            };

            let f_plus = eval_at(orig + h, store)?;
            let f_minus = eval_at(orig - h, store)?;
            // restore
            eval_at(orig, store)?;

            let fd = (f_plus - f_minus) / (2.0 * h);
            let analytic = grads.get(&name).map(|g| g.data()[i]).unwrap_or(0.0);
            let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
