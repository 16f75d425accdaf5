use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, ParamStore, Tape, Var};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is zero are judged by absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter (seeded sample);
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape adjoints with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
///
/// `f` records the scalar function on the supplied tape and returns its
/// root; it must be deterministic in the store's values.
pub fn grad_check<F, E>(
    store: &ParamStore,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let root = f(store, &mut tape)?;
    tape.backward(root)?;
    let grads = tape.param_grads(store)?;
    drop(tape);

    let mut eval = |s: &ParamStore| -> Result<f64, E> {
        let mut t = Tape::new();
        let r = f(s, &mut t)?;
        Ok(t.value(r).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        worst: None,
        tol: opts.tol,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads.get(id).data()[c];
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            if !(rel < opts.tol) {
                report.failures += 1;
            }
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some(CoordCheck {
                    param: store.name(id).to_string(),
                    coord: c,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
