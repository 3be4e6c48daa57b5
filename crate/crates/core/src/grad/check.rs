use std::fmt::Write as _;

use super::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A scalar-valued function of named parameters, evaluable in any precision.
pub trait Objective {
    /// Build the objective on `tape`; `params` are in the order given to the
    /// checker. The result must hold a single element.
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;

    /// `(parameter name, radius)`: elements closer than `radius` to zero are
    /// not checked (non-differentiable points).
    fn skips(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    /// Relative step: `h = step * max(1, |theta|)`.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Additional floor as a fraction of the parameter's largest gradient
    /// magnitude; keeps rounding noise on tiny components of an otherwise
    /// large gradient from dominating reduced-precision checks.
    pub scale_floor: f64,
}

impl FdConfig {
    /// Settings for analytic gradients computed in single precision.
    pub fn mixed() -> Self {
        FdConfig {
            scale_floor: 1e-2,
            ..FdConfig::default()
        }
    }
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            floor: 1e-3,
            scale_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub step: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.rows.iter().map(|r| r.skipped).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.rows.iter().all(|r| r.max_rel_err <= tolerance)
    }

    pub fn extend(&mut self, prefix: &str, other: GradReport) {
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.name = format!("{prefix}{}", r.name);
            r
        }));
    }

    pub const CSV_HEADER: &'static str = "parameter,max_rel_err,max_abs_err,skipped";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.3e},{:.3e},{}",
                r.name, r.max_rel_err, r.max_abs_err, r.skipped
            );
        }
        s
    }
}

fn evaluate<T: Scalar, O: Objective + ?Sized>(
    obj: &O,
    params: &[(String, Tensor<f64>)],
) -> Result<(Tape<T>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(name, t)| tape.param(name, t.cast())).collect();
    let out = obj.eval(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return shape_err(format!("objective returned {:?}, expected one element", tape.dims(out)));
    }
    Ok((tape, vars, out))
}

fn value_f64<O: Objective + ?Sized>(obj: &O, params: &[(String, Tensor<f64>)]) -> Result<f64> {
    let (tape, _, out) = evaluate::<f64, O>(obj, params)?;
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NaN(format!("objective value {v}")));
    }
    Ok(v)
}

fn analytic<T: Scalar, O: Objective + ?Sized>(obj: &O, params: &[(String, Tensor<f64>)]) -> Result<Vec<Tensor<f64>>> {
    let (tape, _, out) = evaluate::<T, O>(obj, params)?;
    let seed = Tensor::<T>::ones(tape.dims(out));
    let grads = tape.backward(out, &seed)?;
    params
        .iter()
        .map(|(name, _)| {
            grads
                .get(name)
                .map(|g| g.cast())
                .ok_or_else(|| Error::Tape(format!("no gradient for `{name}`")))
        })
        .collect()
}

fn compare<O: Objective + ?Sized>(
    obj: &O,
    params: &[(String, Tensor<f64>)],
    grads: &[Tensor<f64>],
    cfg: FdConfig,
) -> Result<GradReport> {
    let skips = obj.skips();
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut report = GradReport::default();
    for (pi, (name, _)) in params.iter().enumerate() {
        let radius = skips
            .iter()
            .filter(|(n, _)| n == name)
            .map(|(_, r)| *r)
            .fold(0.0, f64::max);
        let mut row = GradRow {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            step: cfg.step,
            checked: 0,
            skipped: 0,
        };
        let scale = grads[pi].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = cfg.floor.max(cfg.scale_floor * scale);
        for i in 0..work[pi].1.len() {
            let theta = work[pi].1.data()[i];
            if radius > 0.0 && theta.abs() < radius {
                row.skipped += 1;
                continue;
            }
            let h = cfg.step * theta.abs().max(1.0);
            work[pi].1.data_mut()[i] = theta + h;
            let plus = value_f64(obj, &work)?;
            work[pi].1.data_mut()[i] = theta - h;
            let minus = value_f64(obj, &work)?;
            work[pi].1.data_mut()[i] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[pi].data()[i];
            if !a.is_finite() {
                return Err(Error::NaN(format!("analytic gradient of `{name}`")));
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            row.max_abs_err = row.max_abs_err.max(abs);
            row.max_rel_err = row.max_rel_err.max(rel);
            row.checked += 1;
        }
        report.rows.push(row);
    }
    Ok(report)
}

/// Compare f64 analytic gradients against central differences.
pub fn fd_check<O: Objective + ?Sized>(obj: &O, params: &[(String, Tensor<f64>)], cfg: FdConfig) -> Result<GradReport> {
    let grads = analytic::<f64, O>(obj, params)?;
    compare(obj, params, &grads, cfg)
}

/// Analytic gradients from an f32 forward/backward, differences in f64.
pub fn fd_check_mixed<O: Objective + ?Sized>(
    obj: &O,
    params: &[(String, Tensor<f64>)],
    cfg: FdConfig,
) -> Result<GradReport> {
    let rounded: Vec<(String, Tensor<f64>)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.cast::<f32>().cast::<f64>()))
        .collect();
    let grads = analytic::<f32, O>(obj, &rounded)?;
    compare(obj, &rounded, &grads, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl Objective for Square {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Result<Var> {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.sum(sq))
        }
    }

    #[test]
    fn quadratic_matches_analytic() {
        let params = vec![("theta".to_string(), Tensor::scalar(3.0))];
        let report = fd_check(&Square, &params, FdConfig::default()).unwrap();
        assert!(report.rows[0].max_abs_err < 1e-8);
        assert!(report
            .to_csv()
            .starts_with("parameter,max_rel_err,max_abs_err,skipped\ntheta,"));
    }

    struct Explodes;
    impl Objective for Explodes {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Result<Var> {
            let big = tape.scale(p[0], f64::INFINITY);
            Ok(tape.sum(big))
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let params = vec![("x".to_string(), Tensor::scalar(1.0))];
        assert!(matches!(
            fd_check(&Explodes, &params, FdConfig::default()),
            Err(Error::NaN(_))
        ));
    }
}
