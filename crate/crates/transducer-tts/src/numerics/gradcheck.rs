//! Central-finite-difference verification of analytic gradients.

use ndarray::Array2;

use super::params::ParamSet;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_err() <= tolerance
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Cap on coordinates probed per parameter; 0 means all.
    pub max_coords_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, max_coords_per_param: 0 }
    }
}

/// Compare `analytic` (a per-parameter gradient map, as produced by
/// `Tape::backward`) against central differences of `loss`. Parameters with
/// no analytic entry are treated as frozen and excluded from the report.
/// Relative error for a coordinate uses max(|analytic|, |numeric|) as the
/// denominator; coordinates where both are below 1e-8 count as exact.
pub fn grad_check<F>(
    params: &mut ParamSet,
    analytic: &[Option<Array2<f64>>],
    mut loss: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> f64,
{
    let ids: Vec<_> = params.ids().collect();
    let mut entries = Vec::new();
    for id in ids {
        let Some(grad) = analytic[id.index()].clone() else { continue };
        let name = params.name(id).to_string();
        let total = grad.len();
        let stride = if opts.max_coords_per_param == 0 || total <= opts.max_coords_per_param {
            1
        } else {
            total.div_ceil(opts.max_coords_per_param)
        };
        let (rows, cols) = grad.dim();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut checked = 0;
        for flat in (0..total).step_by(stride) {
            let (r, c) = (flat / cols, flat % cols);
            debug_assert!(r < rows);
            let original = params.value(id)[[r, c]];
            params.value_mut(id)[[r, c]] = original + opts.h;
            let up = loss(params);
            params.value_mut(id)[[r, c]] = original - opts.h;
            let down = loss(params);
            params.value_mut(id)[[r, c]] = original;
            let numeric = (up - down) / (2.0 * opts.h);
            let a = grad[[r, c]];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            let denom = a.abs().max(numeric.abs());
            if denom >= 1e-8 {
                max_rel = max_rel.max(abs / denom);
            }
            checked += 1;
        }
        entries.push(GradCheckEntry { name, max_rel_err: max_rel, max_abs_err: max_abs, coords_checked: checked });
    }
    GradCheckReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::util::rng_for;
    use ndarray::arr2;
    use rand::Rng;

    #[test]
    fn linear_regression_matches_to_1e6() {
        let mut rng = rng_for(11, 0);
        let mut ps = ParamSet::new();
        let w = ps.register("w", Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)));
        let b = ps.register("b", Array2::from_shape_fn((1, 2), |_| rng.gen_range(-1.0..1.0)));
        let x = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));

        let forward = |ps: &ParamSet, want_grads: bool| {
            let mut t = Tape::new(ps);
            let wn = t.param(w);
            let bn = t.param(b);
            let xn = t.input(x.clone());
            let pred = t.matmul(xn, wn);
            let pred = t.add_row(pred, bn);
            let resid = t.add_const(pred, &(-&y));
            let sq = t.mul(resid, resid);
            let loss = t.sum_all(sq);
            let value = t.scalar(loss);
            let grads = want_grads.then(|| t.backward(loss).by_param);
            (value, grads)
        };

        let (_, grads) = forward(&ps, true);
        let report = grad_check(
            &mut ps,
            &grads.unwrap(),
            |ps| forward(ps, false).0,
            &GradCheckOptions::default(),
        );
        assert!(report.within(1e-6), "max rel err {}", report.max_rel_err());
        assert_eq!(report.entries.len(), 2);
    }

    #[test]
    fn frozen_param_absent_from_report() {
        let mut ps = ParamSet::new();
        let used = ps.register("used", arr2(&[[0.5]]));
        ps.register("frozen", arr2(&[[2.0]]));
        let forward = |ps: &ParamSet, want: bool| {
            let mut t = Tape::new(ps);
            let u = t.param(used);
            let sq = t.mul(u, u);
            let loss = t.sum_all(sq);
            (t.scalar(loss), want.then(|| t.backward(loss).by_param))
        };
        let (_, grads) = forward(&ps, true);
        let report =
            grad_check(&mut ps, &grads.unwrap(), |ps| forward(ps, false).0, &GradCheckOptions::default());
        assert!(report.entry("used").is_some());
        assert!(report.entry("frozen").is_none());
    }

    #[test]
    fn coordinate_cap_subsamples() {
        let mut ps = ParamSet::new();
        let w = ps.register("w", Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 * 0.1));
        let forward = |ps: &ParamSet, want: bool| {
            let mut t = Tape::new(ps);
            let wn = t.param(w);
            let sq = t.mul(wn, wn);
            let loss = t.sum_all(sq);
            (t.scalar(loss), want.then(|| t.backward(loss).by_param))
        };
        let (_, grads) = forward(&ps, true);
        let opts = GradCheckOptions { h: 1e-5, max_coords_per_param: 5 };
        let report = grad_check(&mut ps, &grads.unwrap(), |ps| forward(ps, false).0, &opts);
        let entry = report.entry("w").unwrap();
        assert!(entry.coords_checked <= 5 && entry.coords_checked >= 3);
        assert!(report.within(1e-6));
    }
}
