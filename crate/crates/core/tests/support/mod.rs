//! Fixtures and independent reference implementations shared by integration tests.
#![allow(dead_code)]

use longfactor::model::{Dataset, Layout, ModelSpec, ParameterSet, Variant};
use longfactor::{joint_loglik, predict_natural_params, Family};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

pub struct Problem {
    pub spec: ModelSpec,
    pub dataset: Dataset,
    pub params: ParameterSet,
    pub layout: Layout,
}

/// Random data drawn from random parameters. `families` cycles over items.
pub fn random_problem(
    variant: Variant,
    n: usize,
    j: usize,
    t: usize,
    k: usize,
    p: usize,
    families: &[Family],
    seed: u64,
) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec::from_variant(variant, k);
    let pz = usize::from(spec.use_time_covariates);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = (pz > 0).then(|| {
        (0..t)
            .map(|_| DMatrix::from_fn(n, pz, |_, _| rng.gen_range(-1.0..1.0)))
            .collect()
    });
    let mut observed = vec![false; n * t];
    for i in 0..n {
        for s in 0..t {
            observed[i * t + s] = rng.gen_bool(0.75);
        }
        let s = rng.gen_range(0..t);
        observed[i * t + s] = true;
    }
    let fams: Vec<Family> = (0..j).map(|c| families[c % families.len()]).collect();
    let placeholder = Dataset::new(
        n,
        j,
        t,
        vec![0.0; n * j * t],
        observed.clone(),
        x.clone(),
        z.clone(),
        fams.clone(),
    )
    .expect("placeholder dataset");
    let layout = spec.layout(&placeholder).unwrap();
    let mut params = ParameterSet::zeros(n, j, &layout);
    params.theta = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
    params.item_params = DMatrix::from_fn(j, layout.len(), |_, _| rng.gen_range(-0.6..0.6));
    for c in 0..j {
        if fams[c] == Family::Gaussian {
            params.scale[c] = rng.gen_range(0.5..2.0);
        }
    }
    let mut y = vec![0.0; n * j * t];
    for s in 0..t {
        let eta = predict_natural_params(&spec, &placeholder, &params, s).unwrap();
        for i in 0..n {
            for c in 0..j {
                let e = eta[(i, c)];
                y[(i * j + c) * t + s] = match fams[c] {
                    Family::Bernoulli => f64::from(rng.gen::<f64>() < 1.0 / (1.0 + (-e).exp())),
                    Family::Poisson => Poisson::new(e.exp()).unwrap().sample(&mut rng),
                    Family::Gaussian => {
                        e + params.scale[c].sqrt() * rng.sample::<f64, _>(StandardNormal)
                    }
                };
            }
        }
    }
    let dataset = Dataset::new(n, j, t, y, observed, x, z, fams).unwrap();
    Problem {
        spec,
        dataset,
        params,
        layout,
    }
}

/// All natural parameters `η_ijt`, one `N x J` matrix per time.
pub fn all_eta(spec: &ModelSpec, ds: &Dataset, params: &ParameterSet) -> Vec<DMatrix<f64>> {
    (0..ds.n_times())
        .map(|t| predict_natural_params(spec, ds, params, t).unwrap())
        .collect()
}

/// Largest `|η_a − η_b| / (1 + |η_a|)`.
pub fn max_eta_gap(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.iter()
                .zip(y.iter())
                .map(|(u, v)| (u - v).abs() / (1.0 + u.abs()))
        })
        .fold(0.0, f64::max)
}

/// Largest violation of the full identifiability criteria.
pub fn criteria_violation(layout: &Layout, params: &ParameterSet, x: &DMatrix<f64>) -> f64 {
    let n = params.theta.nrows() as f64;
    let jn = params.item_params.nrows() as f64;
    let k = layout.n_factors;
    let theta = &params.theta;
    let mut worst = 0.0f64;
    if !layout.linear_intercept {
        worst = worst.max((theta.row_sum() / n).amax());
    }
    if x.ncols() > 0 {
        worst = worst.max((theta.transpose() * x / n).amax());
    }
    let a = params.loadings(layout, 0);
    worst = worst.max((a.transpose() * &a / jn - DMatrix::identity(k, k)).amax());
    let s = theta.transpose() * theta / n;
    for r in 0..k {
        for c in 0..k {
            if r != c {
                worst = worst.max(s[(r, c)].abs());
            }
        }
        if r + 1 < k && s[(r + 1, r + 1)] > s[(r, r)] + 1e-12 {
            worst = worst.max(s[(r + 1, r + 1)] - s[(r, r)]);
        }
    }
    worst
}

/// Central finite difference of the joint log-likelihood along one entry.
pub fn fd_item(
    spec: &ModelSpec,
    ds: &Dataset,
    params: &ParameterSet,
    j: usize,
    c: usize,
    h: f64,
) -> f64 {
    let mut p = params.clone();
    p.item_params[(j, c)] += h;
    let up = joint_loglik(spec, ds, &p).unwrap();
    p.item_params[(j, c)] -= 2.0 * h;
    let down = joint_loglik(spec, ds, &p).unwrap();
    (up - down) / (2.0 * h)
}

pub fn fd_person(
    spec: &ModelSpec,
    ds: &Dataset,
    params: &ParameterSet,
    i: usize,
    c: usize,
    h: f64,
) -> f64 {
    let mut p = params.clone();
    p.theta[(i, c)] += h;
    let up = joint_loglik(spec, ds, &p).unwrap();
    p.theta[(i, c)] -= 2.0 * h;
    let down = joint_loglik(spec, ds, &p).unwrap();
    (up - down) / (2.0 * h)
}

pub fn relative_error(analytic: &DVector<f64>, numeric: &DVector<f64>) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(numeric.norm()).max(1.0)
}

/// Textbook IRLS for logistic regression on `[1, x]`.
pub fn irls_logistic(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mut b = [0.0f64; 2];
    for _ in 0..100 {
        let mut h = [[0.0f64; 2]; 2];
        let mut z = [0.0f64; 2];
        for (&xi, &yi) in x.iter().zip(y) {
            let mu = 1.0 / (1.0 + (-(b[0] + b[1] * xi)).exp());
            let w = mu * (1.0 - mu);
            let row = [1.0, xi];
            let work = b[0] + b[1] * xi + (yi - mu) / w;
            for r in 0..2 {
                z[r] += w * row[r] * work;
                for c in 0..2 {
                    h[r][c] += w * row[r] * row[c];
                }
            }
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let next = [
            (h[1][1] * z[0] - h[0][1] * z[1]) / det,
            (h[0][0] * z[1] - h[1][0] * z[0]) / det,
        ];
        let step = (next[0] - b[0]).abs().max((next[1] - b[1]).abs());
        b = next;
        if step < 1e-14 {
            break;
        }
    }
    (b[0], b[1])
}

/// Base-model Bernoulli problem written out by hand for the reference optimizer:
/// `η_ijt = γ_jt + β_jᵀx_i + a_jᵀθ_i`.
pub struct PlainProblem {
    pub n: usize,
    pub j: usize,
    pub t: usize,
    pub k: usize,
    pub p: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub r: Vec<bool>,
    pub c1: f64,
    pub c2: f64,
}

/// Unknowns of [`PlainProblem`]: `theta[i]` and `u[j] = (γ_j1..γ_jT, β_j, a_j)`.
#[derive(Clone)]
pub struct PlainParams {
    pub theta: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl PlainProblem {
    fn eta(&self, q: &PlainParams, i: usize, j: usize, t: usize) -> f64 {
        let u = &q.u[j];
        let mut e = u[t];
        for l in 0..self.p {
            e += u[self.t + l] * self.x[i][l];
        }
        for c in 0..self.k {
            e += u[self.t + self.p + c] * q.theta[i][c];
        }
        e
    }

    pub fn loglik(&self, q: &PlainParams) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            for t in 0..self.t {
                if !self.r[i * self.t + t] {
                    continue;
                }
                for j in 0..self.j {
                    let e = self.eta(q, i, j, t);
                    let soft = if e > 0.0 {
                        e + (-e).exp().ln_1p()
                    } else {
                        e.exp().ln_1p()
                    };
                    total += self.y[(i * self.j + j) * self.t + t] * e - soft;
                }
            }
        }
        total
    }

    fn gradient(&self, q: &PlainParams) -> PlainParams {
        let mut g = PlainParams {
            theta: vec![vec![0.0; self.k]; self.n],
            u: vec![vec![0.0; self.t + self.p + self.k]; self.j],
        };
        for i in 0..self.n {
            for t in 0..self.t {
                if !self.r[i * self.t + t] {
                    continue;
                }
                for j in 0..self.j {
                    let e = self.eta(q, i, j, t);
                    let res = self.y[(i * self.j + j) * self.t + t] - 1.0 / (1.0 + (-e).exp());
                    g.u[j][t] += res;
                    for l in 0..self.p {
                        g.u[j][self.t + l] += res * self.x[i][l];
                    }
                    for c in 0..self.k {
                        g.u[j][self.t + self.p + c] += res * q.theta[i][c];
                        g.theta[i][c] += res * q.u[j][self.t + self.p + c];
                    }
                }
            }
        }
        g
    }

    fn project(&self, q: &mut PlainParams) {
        let ball = |v: &mut Vec<f64>, c: f64| {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > c {
                v.iter_mut().for_each(|a| *a *= c / norm);
            }
        };
        let rt = self.c1 * (self.k as f64).sqrt();
        let ru = self.c2 * ((self.t + self.p + self.k) as f64).sqrt();
        q.theta.iter_mut().for_each(|v| ball(v, rt));
        q.u.iter_mut().for_each(|v| ball(v, ru));
    }

    fn step(q: &PlainParams, g: &PlainParams, s: f64) -> PlainParams {
        let add = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.iter().zip(y).map(|(p, d)| p + s * d).collect())
                .collect()
        };
        PlainParams {
            theta: add(&q.theta, &g.theta),
            u: add(&q.u, &g.u),
        }
    }

    /// Projected gradient ascent on all unknowns jointly, with backtracking.
    pub fn maximize(&self, start: &PlainParams, iters: usize) -> (PlainParams, f64) {
        let mut q = start.clone();
        self.project(&mut q);
        let mut f = self.loglik(&q);
        let mut s = 0.1;
        for _ in 0..iters {
            let g = self.gradient(&q);
            let mut accepted = false;
            for _ in 0..60 {
                let mut cand = Self::step(&q, &g, s);
                self.project(&mut cand);
                let fc = self.loglik(&cand);
                if fc > f {
                    let gain = fc - f;
                    q = cand;
                    f = fc;
                    s *= 1.5;
                    accepted = gain > 1e-13 * f.abs();
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (q, f)
    }
}

/// Worst relative error between analytic block gradients and central differences
/// over `points` random parameter sets of one variant.
pub fn gradient_check(variant: Variant, points: usize, seed: u64) -> f64 {
    use longfactor::estimator::{item_block_gradient, person_block_gradient};
    let families = [Family::Bernoulli, Family::Poisson, Family::Gaussian];
    let h = 1e-5;
    let mut worst = 0.0f64;
    for pt in 0..points {
        let pr = random_problem(variant, 12, 5, 3, 2, 2, &families, seed + pt as u64);
        let (spec, ds, params) = (&pr.spec, &pr.dataset, &pr.params);
        for j in 0..ds.n_items() {
            let g = item_block_gradient(spec, ds, params, j).unwrap();
            let fd = DVector::from_fn(g.len(), |c, _| fd_item(spec, ds, params, j, c, h));
            worst = worst.max(relative_error(&g, &fd));
        }
        for i in 0..ds.n_persons() {
            let g = person_block_gradient(spec, ds, params, i).unwrap();
            let fd = DVector::from_fn(g.len(), |c, _| fd_person(spec, ds, params, i, c, h));
            worst = worst.max(relative_error(&g, &fd));
        }
    }
    worst
}

/// Fits one small Bernoulli instance with the library and with the reference
/// optimizer from the same start; returns `(library, reference)` log-likelihoods.
pub fn oracle_pair(seed: u64) -> (f64, f64) {
    use longfactor::{fit, svd_init, FitOptions, InitOptions};
    let (n, j, t, k, p) = (30, 4, 2, 1, 1);
    let pr = random_problem(Variant::Base, n, j, t, k, p, &[Family::Bernoulli], seed);
    let start = svd_init(&pr.spec, &pr.dataset, &InitOptions::default()).unwrap();

    let opts = FitOptions {
        rel_tol: 1e-12,
        max_sweeps: 20_000,
        ..Default::default()
    };
    let lib = fit(&pr.spec, &pr.dataset, &start, &opts).unwrap().loglik;

    let ds = &pr.dataset;
    let plain = PlainProblem {
        n,
        j,
        t,
        k,
        p,
        x: (0..n).map(|i| ds.covariate_row(i).to_vec()).collect(),
        y: ds.responses().to_vec(),
        r: ds.observed().to_vec(),
        c1: pr.spec.c1,
        c2: pr.spec.c2,
    };
    let q0 = PlainParams {
        theta: (0..n)
            .map(|i| start.theta.row(i).iter().cloned().collect())
            .collect(),
        u: (0..j)
            .map(|c| start.item_params.row(c).iter().cloned().collect())
            .collect(),
    };
    let (_, reference) = plain.maximize(&q0, 200_000);
    (lib, reference)
}

/// Normalizes `count` random parameter sets of one variant; returns the worst
/// natural-parameter change and the worst criteria violation.
pub fn normalization_check(variant: Variant, count: usize, seed: u64) -> (f64, f64) {
    use longfactor::normalize_full;
    let mut eta_gap = 0.0f64;
    let mut violation = 0.0f64;
    for s in 0..count {
        let pr = random_problem(
            variant,
            40,
            8,
            3,
            2,
            2,
            &[Family::Bernoulli],
            seed + s as u64,
        );
        let x = pr.dataset.covariate_matrix();
        let (out, _) = normalize_full(&pr.layout, &pr.params, &x).unwrap();
        eta_gap = eta_gap.max(max_eta_gap(
            &all_eta(&pr.spec, &pr.dataset, &pr.params),
            &all_eta(&pr.spec, &pr.dataset, &out),
        ));
        violation = violation.max(criteria_violation(&pr.layout, &out, &x));
    }
    (eta_gap, violation)
}
