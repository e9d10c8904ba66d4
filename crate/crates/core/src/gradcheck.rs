//! Central finite-difference checks of tape gradients against parameters.

use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

/// Outcome for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, or 0 when both vanish.
    pub rel_error: f64,
}

/// Compares the tape gradient of the scalar built by `objective` with
/// central differences of step `h`, for every parameter in `names`.
///
/// At most `max_entries` entries per parameter are perturbed, spread evenly
/// over the flattened array.
pub fn check_params<F>(
    store: &ParamStore,
    names: &[&str],
    h: f64,
    max_entries: usize,
    objective: F,
) -> Vec<ParamCheck>
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let out = objective(&mut tape, &bound);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = objective(&mut tape, &bound);
    let mut grads = tape.backward(out);
    let analytic = bound.collect(&tape, &mut grads);

    let mut report = Vec::with_capacity(names.len());
    let mut work = store.clone();
    for &name in names {
        let len = store.expect(name).len();
        let stride = len.div_ceil(max_entries.max(1)).max(1);
        let (mut diff, mut na, mut nn, mut checked) = (0.0, 0.0, 0.0, 0);
        for idx in (0..len).step_by(stride) {
            let base = work.expect(name).as_slice().expect("contiguous")[idx];
            let set = |v: f64, w: &mut ParamStore| {
                w.get_mut(name).unwrap().as_slice_mut().expect("contiguous")[idx] = v;
            };
            set(base + h, &mut work);
            let fp = eval(&work);
            set(base - h, &mut work);
            let fm = eval(&work);
            set(base, &mut work);
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic.expect(name).as_slice().expect("contiguous")[idx];
            diff += (ana - num) * (ana - num);
            na += ana * ana;
            nn += num * num;
            checked += 1;
        }
        let denom = na.sqrt() + nn.sqrt();
        let rel_error = if denom < 1e-12 { 0.0 } else { diff.sqrt() / denom };
        report.push(ParamCheck {
            name: name.to_string(),
            checked,
            rel_error,
        });
    }
    report
}

/// Largest relative error in a report.
pub fn worst(report: &[ParamCheck]) -> f64 {
    report.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}
