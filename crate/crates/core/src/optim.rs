//! Bounded scalar maximization: a coarse scan to locate the basin, then
//! Brent's golden-section/parabolic search inside the bracket, then an
//! explicit comparison against both interval endpoints so that boundary
//! maxima are returned exactly.

const SQRT_EPS: f64 = 1.490_116_119_384_765_6e-8;
const GOLDEN_RATIO_C: f64 = 0.381_966_011_250_105_1;

#[derive(Debug, Clone, Copy)]
pub struct Maximum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// The maximum sits on an endpoint of the search interval.
    pub at_lower: bool,
    pub at_upper: bool,
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    /// Points of the preliminary scan (endpoints included).
    pub grid: Vec<f64>,
    /// Absolute tolerance on the abscissa.
    pub xtol: f64,
    pub max_iter: usize,
}

/// Grid for a variance parameter on `[0, hi]`: uniform points plus a
/// geometric ladder towards zero, where small variance components live.
pub fn variance_grid(hi: f64, uniform: usize, geometric: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=uniform)
        .map(|i| hi * i as f64 / uniform as f64)
        .collect();
    for k in 0..geometric {
        let e = -8.0 * (k as f64 + 1.0) / geometric as f64;
        g.push(hi * 10f64.powf(e));
    }
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    g.dedup();
    g
}

/// Grid on `[0, 1]` with extra points packed near both ends.
pub fn unit_interval_grid(uniform: usize, tail: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=uniform).map(|i| i as f64 / uniform as f64).collect();
    for k in 1..=tail {
        let t = 10f64.powf(-(k as f64) * 8.0 / tail as f64) / uniform as f64;
        g.push(t);
        g.push(1.0 - t);
    }
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    g.dedup();
    g
}

/// Maximize `f` over `[grid.first(), grid.last()]`.
///
/// Non-finite objective values are treated as `-inf`.
pub fn maximize_scalar<F: FnMut(f64) -> f64>(mut f: F, opts: &ScanOptions) -> Maximum {
    let grid = &opts.grid;
    assert!(grid.len() >= 2, "scan grid needs at least two points");
    let mut eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };
    let values: Vec<f64> = grid.iter().map(|&x| eval(x)).collect();
    let mut evaluations = grid.len();
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];

    let (x, value, iters, converged) = brent_max(&mut eval, lo, hi, opts.xtol, opts.max_iter);
    evaluations += iters + 1;

    let mut out = Maximum {
        x,
        value,
        evaluations,
        converged,
        at_lower: false,
        at_upper: false,
    };
    if values[best] > out.value {
        out.x = grid[best];
        out.value = values[best];
    }
    let first = grid[0];
    let last = *grid.last().unwrap();
    if values[0] >= out.value {
        out.x = first;
        out.value = values[0];
    }
    if values[grid.len() - 1] > out.value {
        out.x = last;
        out.value = values[grid.len() - 1];
    }
    out.at_lower = out.x == first;
    out.at_upper = out.x == last;
    if out.at_lower || out.at_upper {
        out.converged = true;
    }
    out
}

/// Brent's bounded minimization applied to `-f`. Returns
/// `(x, f(x), iterations, converged)`.
fn brent_max<F: FnMut(f64) -> f64>(
    f: &mut F,
    lo: f64,
    hi: f64,
    xtol: f64,
    max_iter: usize,
) -> (f64, f64, usize, bool) {
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLDEN_RATIO_C * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = -f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for iter in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = SQRT_EPS * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return (x, -fx, iter, true);
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN_RATIO_C * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d >= 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = -f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx, max_iter, false)
}
