//! Central finite-difference verification of tape gradients.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub probes: usize,
    /// Coordinates skipped because a perturbation crossed a relu or max kink.
    pub rejected: usize,
    /// Coordinates skipped because the function is too curved (or the
    /// gradient too close to zero) for a central difference at this step to
    /// resolve the gradient; see [`check_probes`].
    pub ill_conditioned: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            probes: self.probes + other.probes,
            rejected: self.rejected + other.rejected,
            ill_conditioned: self.ill_conditioned + other.ill_conditioned,
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            probes: 0,
            rejected: 0,
            ill_conditioned: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest truncation error, in relative-error units, that a compared probe
/// may carry.
pub const MAX_TRUNCATION: f64 = 2.5e-5;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-5, 1e-2]"
        )));
    }
    Ok(())
}

/// Compares analytic gradients against central differences.
///
/// `eval(probe, delta)` must evaluate the scalar function with coordinate
/// `probe` shifted by `delta` (and restore it afterwards), returning the value
/// and the tape's kink signature. Probes whose perturbed evaluations change
/// the signature are counted as rejected instead of compared.
///
/// The central difference at `2 * eps` gives an estimate of the truncation
/// error at `eps`: a third of the gap between the two. Probes where that
/// estimate alone exceeds [`MAX_TRUNCATION`] cannot be resolved at this step
/// and are counted as ill-conditioned. The estimate uses function values
/// only, so a wrong analytic gradient never qualifies a probe for skipping
/// unless the discrepancy is below the truncation error as well.
pub fn check_probes<E>(analytic: &[f64], eps: f64, mut eval: E) -> Result<GradCheckReport>
where
    E: FnMut(usize, f64) -> Result<(f64, u64)>,
{
    check_eps(eps)?;
    let mut report = GradCheckReport::default();
    if analytic.is_empty() {
        return Ok(report);
    }
    let (_, base_sig) = eval(0, 0.0)?;
    for (i, &a) in analytic.iter().enumerate() {
        let (fp, sp) = eval(i, eps)?;
        let (fm, sm) = eval(i, -eps)?;
        let (fp2, sp2) = eval(i, 2.0 * eps)?;
        let (fm2, sm2) = eval(i, -2.0 * eps)?;
        if [sp, sm, sp2, sm2].iter().any(|&s| s != base_sig) {
            report.rejected += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let wide = (fp2 - fm2) / (4.0 * eps);
        let truncation = (wide - numeric).abs() / 3.0;
        if truncation > MAX_TRUNCATION * a.abs().max(numeric.abs()).max(1e-8) {
            report.ill_conditioned += 1;
            continue;
        }
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.probes += 1;
    }
    Ok(report)
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalar(v.shape()));
    }
    Ok(v.item())
}

/// Checks every coordinate of `x` for the scalar function `f`.
pub fn grad_check_report<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_output(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut probe = x.clone();
    check_probes(&analytic, eps, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let mut tape = Tape::new();
        let xv = tape.leaf(probe.clone());
        let out = f(&mut tape, xv);
        probe.data_mut()[i] = orig;
        let out = out?;
        Ok((scalar_output(&tape, out)?, tape.kink_signature()))
    })
}

/// Maximum relative error between analytic and central-difference gradients
/// of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_report(f, x, eps).map(|r| r.max_rel_error)
}

/// Checks the gradient of the scalar built by `f` with respect to selected
/// parameter coordinates. Batch-norm buffers touched during the probes are
/// restored afterwards.
pub fn param_grad_check<F>(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    eps: f64,
    training: bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    check_eps(eps)?;
    let snapshot = store.clone();
    let analytic: Vec<f64> = {
        let mut ctx = Ctx::new(store, training);
        let out = f(&mut ctx)?;
        scalar_output(&ctx.tape, out)?;
        ctx.backward(out)?;
        probes
            .iter()
            .map(|&(id, i)| ctx.param_grad(id).map_or(0.0, |g| g[i]))
            .collect()
    };
    let report = check_probes(&analytic, eps, |k, delta| {
        let (id, i) = probes[k];
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + delta;
        let result = {
            let mut ctx = Ctx::new(store, training);
            f(&mut ctx)
                .and_then(|out| Ok((scalar_output(&ctx.tape, out)?, ctx.tape.kink_signature())))
        };
        store.get_mut(id).data_mut()[i] = orig;
        result
    });
    *store = snapshot;
    report
}

/// Up to `count` random trainable coordinates among parameters whose name
/// starts with `prefix`.
pub fn sample_probes(
    store: &ParamStore,
    prefix: &str,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store
        .trainable_ids()
        .filter(|&id| store.entry(id).name.starts_with(prefix))
        .collect();
    if ids.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..store.get(id).numel()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unresolvable_probes_are_skipped_but_wrong_gradients_are_not() {
        // Roundoff around a zero gradient: nothing to resolve.
        let ulp = f64::EPSILON * 700.0;
        let r = check_probes(&[0.0], 1e-3, |_, d| {
            Ok((700.0 + if d > 0.0 { 2.0 * ulp } else { 0.0 }, 0))
        })
        .unwrap();
        assert_eq!((r.probes, r.ill_conditioned), (0, 1));
        // Steep cubic with a tiny slope: truncation dominates.
        let r = check_probes(&[1e-3], 1e-3, |_, d| Ok((1e-3 * d + 1e3 * d * d * d, 0))).unwrap();
        assert_eq!((r.probes, r.ill_conditioned), (0, 1));
        // A wrong slope on a smooth function is compared and reported.
        let r = check_probes(&[1.0], 1e-3, |_, d| Ok((1.001 * d + d * d, 0))).unwrap();
        assert_eq!(r.probes, 1);
        assert!(r.max_rel_error > 9e-4, "{r:?}");
        // A nonzero analytic gradient where the function is flat is reported.
        let r = check_probes(&[0.5], 1e-3, |_, _| Ok((700.0, 0))).unwrap();
        assert_eq!(r.probes, 1);
        assert_eq!(r.max_rel_error, 1.0);
    }

    #[test]
    fn linear_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(Shape::new(1, 2, 3, 3), -2.0, 2.0, &mut rng);
        let err = grad_check(
            |t, x| {
                let s = t.sigmoid(x);
                Ok(t.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
        let err = grad_check(
            |t, x| {
                let w = t.leaf(w.clone());
                let y = t.conv2d(x, w, None, 1, 1)?;
                Ok(t.sum(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            grad_check(|_, x| Ok(x), &x, 1e-3),
            Err(Error::NonScalar(_))
        ));
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.5).is_err());
    }

    #[test]
    fn kinks_are_rejected_not_compared() {
        // relu at exactly 0 with eps straddling the kink.
        let x = Tensor::zeros(Shape::new(1, 1, 1, 3));
        let r = grad_check_report(
            |t, x| {
                let y = t.relu(x);
                Ok(t.sum(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.rejected, 3);
        assert_eq!(r.probes, 0);
    }
}
