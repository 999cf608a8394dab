//! Central finite-difference gradient checking.
//!
//! The oracle is deliberately independent of the tape's adjoint code: it
//! only re-evaluates the forward function at perturbed points. Relative
//! error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.

use super::{ParamStore, Result, Tape, Tensor, TensorError, Var};
use crate::rng::{fnv1a64, Stream};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(parameter-or-input label, flat index, analytic, numeric)` of the
    /// worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn update(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        self.coords_checked += 1;
        let rel = rel_err(analytic, numeric);
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Jitters every non-frozen parameter so checks run at a generic point.
///
/// Symmetric initializations hide adjoint bugs: unit layer-norm gains make
/// whole gradient paths exactly zero under a plain mean root, and equal
/// token energies put top-k selection on a tie boundary where central
/// differences straddle a jump. The jitter is derived from `(seed, name)`
/// and is therefore reproducible.
pub fn randomize_params(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in names {
        let id = store.lookup(&name).expect("name from iteration");
        let mut stream = Stream::substream(seed, fnv1a64(name.as_bytes()) ^ 0x6A09_E667);
        for x in &mut store.get_mut(id).tensor.data {
            *x = *x * (1.0 + 0.5 * stream.next_gaussian()) + 0.2 * stream.next_gaussian();
        }
    }
}

/// Scalar probe `mean(x ⊙ r)` against a fixed random direction `r`.
///
/// A plain sum or mean root annihilates gradients along symmetries (for
/// example everything upstream of a layer norm whose output is averaged);
/// the random direction makes generic gradients nonzero.
pub fn random_probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut stream = Stream::substream(seed, 0x5058_4F42);
    let n: usize = shape.iter().product();
    let dir = Tensor::new(shape, (0..n).map(|_| stream.next_gaussian()).collect())?;
    let d = tape.constant(dir);
    let weighted = tape.hadamard(x, d)?;
    tape.mean_all(weighted)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(TensorError::Config(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    Ok(())
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let d = tape.data(v);
    if d.len() != 1 {
        return Err(TensorError::Usage(format!(
            "gradient check target must be scalar, got shape {:?}",
            tape.shape(v)
        )));
    }
    Ok(d[0])
}

/// Checks ∂f/∂p for every coordinate of every non-frozen parameter in
/// `store` against central differences with step `h`.
///
/// `f` must be deterministic; this is verified by evaluating the base point
/// twice and requiring bit-identical scalars.
pub fn grad_check_params<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    check_step(h)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(store, &mut tape)?;
        scalar_of(&tape, root)
    };

    let base = eval(store)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(TensorError::Usage(
            "oracle invalid: f is not deterministic".into(),
        ));
    }

    store.zero_grads();
    let mut tape = Tape::new();
    let root = f(store, &mut tape)?;
    scalar_of(&tape, root)?;
    tape.backward(root, store)?;

    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| {
            let g = p
                .tensor
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; p.tensor.data.len()]);
            (p.name.clone(), g)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    for (slot, id) in ids.iter().enumerate() {
        let n = store.get(*id).tensor.data.len();
        for ci in 0..n {
            let orig = store.get(*id).tensor.data[ci];
            store.get_mut(*id).tensor.data[ci] = orig + h;
            let fp = eval(store)?;
            store.get_mut(*id).tensor.data[ci] = orig - h;
            let fm = eval(store)?;
            store.get_mut(*id).tensor.data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let (name, g) = &analytic[slot];
            report.update(name, ci, g[ci], numeric);
        }
    }
    Ok(report)
}

/// Same oracle, but differentiating with respect to the input tensors that
/// have `requires_grad` set. `f` receives the inputs already registered as
/// tape leaves, in order.
pub fn grad_check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_step(h)?;
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
        let root = f(&mut tape, &vars)?;
        scalar_of(&tape, root)
    };

    let base = eval(inputs)?;
    if eval(inputs)?.to_bits() != base.to_bits() {
        return Err(TensorError::Usage(
            "oracle invalid: f is not deterministic".into(),
        ));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let root = f(&mut tape, &vars)?;
    scalar_of(&tape, root)?;
    let mut scratch = ParamStore::new();
    tape.backward(root, &mut scratch)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for ti in 0..work.len() {
        if !work[ti].requires_grad {
            continue;
        }
        let label = format!("input{ti}");
        for ci in 0..work[ti].data.len() {
            let orig = work[ti].data[ci];
            work[ti].data[ci] = orig + h;
            let fp = eval(&work)?;
            work[ti].data[ci] = orig - h;
            let fm = eval(&work)?;
            work[ti].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            report.update(&label, ci, analytic[ti][ci], numeric);
        }
    }
    Ok(report)
}
