//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::params::{GradBuffer, ParamId, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative errors below this floor are treated as agreeing zeros.
const DENOM_FLOOR: f64 = 1e-12;

/// Entries at least this large are tracked separately in
/// [`GradCheckReport::max_rel_error_significant`]; much smaller derivatives
/// sit close to the rounding noise of a difference quotient.
pub const SIGNIFICANT_GRAD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)` over all entries.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Same maximum restricted to entries with `max(|analytic|, |numeric|) >= SIGNIFICANT_GRAD`.
    pub max_rel_error_significant: f64,
    pub entries_checked: usize,
    /// Entries whose step had to shrink below `eps` to stay off ReLU kinks.
    pub kink_adjusted: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` against central differences of `f` at every parameter entry.
///
/// `f` must be deterministic. Entries are perturbed independently, in
/// parallel when `mode` allows it.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    analytic: &GradBuffer,
    eps: f64,
    mode: ExecMode,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync + Send,
{
    check_entries(store, analytic, eps, mode, |s| Ok((f(s)?, Vec::new())))
}

/// Smallest step tried when shrinking away from a kink, relative to `eps`.
const MAX_SHRINK: i32 = 6;

/// Core loop. `f` also returns a piece signature; a step is accepted only if
/// both perturbed points share the signature of the unperturbed point, and
/// otherwise shrinks tenfold up to `MAX_SHRINK` times.
fn check_entries<F>(store: &ParamStore, analytic: &GradBuffer, eps: f64, mode: ExecMode, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<bool>)> + Sync + Send,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let (_, base_piece) = f(store)?;
    let entries: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value().len()).map(move |i| (id, i)))
        .collect();

    let evaluated = exec::map(mode, &entries, |&(id, i)| -> Result<(f64, bool)> {
        let probe = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut local = store.clone();
            local.value_mut(id).data_mut()[i] += delta;
            let (v, piece) = f(&local)?;
            if v.is_finite() {
                Ok((v, piece))
            } else {
                Err(Error::Numerical(format!(
                    "non-finite objective when perturbing {}[{i}]",
                    store.name(id)
                )))
            }
        };
        let mut h = eps;
        for shrink in 0..=MAX_SHRINK {
            let (up, up_piece) = probe(h)?;
            let (down, down_piece) = probe(-h)?;
            let smooth = up_piece == base_piece && down_piece == base_piece;
            if smooth || shrink == MAX_SHRINK {
                return Ok(((up - down) / (2.0 * h), shrink > 0));
            }
            h /= 10.0;
        }
        unreachable!("the last shrink step always returns")
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        max_rel_error_significant: 0.0,
        entries_checked: entries.len(),
        kink_adjusted: 0,
    };
    for (&(id, i), res) in entries.iter().zip(evaluated) {
        let (n, adjusted) = res?;
        let a = analytic.get(id)[i];
        report.kink_adjusted += adjusted as usize;
        let err = relative_error(a, n);
        if a.abs().max(n.abs()) >= SIGNIFICANT_GRAD {
            report.max_rel_error_significant = report.max_rel_error_significant.max(err);
        }
        if err > report.max_rel_error || report.worst_param.is_none() {
            report.max_rel_error = err;
            report.worst_param = Some(store.name(id).to_string());
            report.worst_index = Some(i);
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    Ok(report)
}

/// Builds the scalar loss with `build`, differentiates it, and checks every
/// parameter of `store` against central differences of the same function.
///
/// Steps that would move any ReLU input across zero are shrunk, so the
/// difference quotient never straddles a kink.
pub fn check_graph_loss<B>(
    store: &ParamStore,
    eps: f64,
    mode: ExecMode,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync + Send,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic = GradBuffer::zeros_like(store);
    grads.accumulate_into_buffer(&mut analytic);
    check_entries(store, &analytic, eps, mode, |s| {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok((g.value(loss).item()?, g.relu_pattern()))
    })
}
