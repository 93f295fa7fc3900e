//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use prevmap::covfn::CovarianceSpec;
use prevmap::evalkit::{cv_run, interval_coverage, kmeans_folds, metrics, ERROR_THRESHOLDS};
use prevmap::frk::{self, place_basis, BasisSet, BauGrid, FrkParams, FrkResponse, FrkSpec};
use prevmap::geodata::{BoundingBox, Location, Raster, SurveyRecord};
use prevmap::gpcore::{gp_nll, gp_nll_vecchia, BoostingSpec, GpModelSpec, Theta};
use prevmap::lgm::{self, Lattice, LgmHyper, LgmResponse, LgmSpec};
use prevmap::model::ModelConfig;
use prevmap::simkit::{inv_logit, simulate, SimConfig, SiteSpec, TestsPerSite};
use prevmap::sprf::{self, SprfSpec};
use prevmap_cli::{bench_scaling, BenchOptions, BenchReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Written to the process stdout so the line shows even when output is captured.
fn report(n: usize, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    writeln!(std::io::stdout(), "criterion {n} {name}: {verdict} ({detail})").unwrap();
}

fn within(t: Instant, limit: Duration) -> bool {
    t.elapsed() < limit
}

fn surface_raster(origin: Location, cell: f64, rows: usize, cols: usize, f: impl Fn(Location) -> f64) -> Raster {
    let base = Raster::new(origin, cell, rows, cols).unwrap();
    base.with_values(base.cell_centres().iter().map(|l| f(*l)).collect()).unwrap()
}

/// Two Gaussian bumps on a low logit baseline over [0, 4]^2.
fn two_bumps(l: Location) -> f64 {
    let g = |cx: f64, cy: f64, s: f64| (-((l.lon - cx).powi(2) + (l.lat - cy).powi(2)) / (2.0 * s * s)).exp();
    inv_logit(-2.0 + 2.5 * g(1.2, 1.2, 0.5) + 2.0 * g(2.8, 2.6, 0.6))
}

fn two_bump_raster() -> Raster {
    surface_raster(Location { lon: 0.0, lat: 0.0 }, 0.1, 40, 40, two_bumps)
}

fn uniform_survey(raster: &Raster, n: usize, noise_sd: f64, seed: u64) -> Vec<SurveyRecord> {
    simulate(&SimConfig {
        raster: raster.clone(),
        locations: SiteSpec::Uniform(n),
        tests_per_site: TestsPerSite::Constant(85),
        noise_sd,
        seed,
    })
    .unwrap()
    .records
}

fn lattice_spec(response: LgmResponse) -> LgmSpec {
    LgmSpec {
        lattice_cell: 0.2,
        margin: 4.0,
        response,
        ..Default::default()
    }
}

fn gp_spec() -> GpModelSpec {
    GpModelSpec {
        boosting: BoostingSpec {
            rounds: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn criterion_01_vecchia_exactness() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(10..=200);
        let pts: Vec<Location> = (0..n)
            .map(|_| Location {
                lon: rng.random_range(0.0..5.0),
                lat: rng.random_range(0.0..5.0),
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let theta = Theta::new(rng.random_range(0.1..2.0), rng.random_range(0.2..3.0), rng.random_range(0.01..0.5));
        let base = CovarianceSpec::exponential(1.0, 1.0);
        let exact = gp_nll(&y, &f, theta, &pts, &base).unwrap();
        let vecchia = gp_nll_vecchia(&y, &f, theta, &pts, &base, n - 1).unwrap();
        worst = worst.max((exact - vecchia).abs());
    }
    let pass = worst <= 1e-8 && within(t, Duration::from_secs(10));
    report(1, "vecchia exactness", pass, format!("max |gap| {worst:.2e}, {:.2}s", t.elapsed().as_secs_f64()));
    assert!(pass);
}

fn gaussian_marginal(y: &DVector<f64>, cov: DMatrix<f64>) -> f64 {
    let ch = cov.cholesky().unwrap();
    let quad = y.dot(&ch.solve(y));
    let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * quad - 0.5 * logdet - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Per-resolution `tau (rho L + (1 - rho) I)` on each basis lattice.
fn car_precision(basis: &BasisSet, p: &FrkParams) -> DMatrix<f64> {
    let r = basis.len();
    let mut k = DMatrix::zeros(r, r);
    for (res, &(nx, ny)) in basis.grids.iter().enumerate() {
        let off = basis.range_of(res).start;
        let (tau, rho) = (p.tau[res], p.rho[res]);
        for j in 0..ny {
            for i in 0..nx {
                let a = off + j * nx + i;
                let mut deg = 0.0;
                for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny {
                        k[(a, off + jj as usize * nx + ii as usize)] = -tau * rho;
                        deg += 1.0;
                    }
                }
                k[(a, a)] = tau * (rho * deg + 1.0 - rho);
            }
        }
    }
    k
}

fn frk_gaussian_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let recs: Vec<SurveyRecord> = (0..70)
        .map(|_| {
            let loc = Location {
                lon: rng.random_range(0.0..2.0),
                lat: rng.random_range(0.0..1.0),
            };
            SurveyRecord::new(loc, 100, rng.random_range(5..60)).unwrap()
        })
        .collect();
    let dom = BoundingBox::new(Location { lon: 0.0, lat: 0.0 }, Location { lon: 2.0, lat: 1.0 });
    let noise = 0.02;
    let spec = FrkSpec {
        nres: 2,
        bau_cell_size: 0.25,
        response: FrkResponse::Gaussian { noise_variance: noise },
        ..Default::default()
    };
    let basis = place_basis(dom, 2, 1, 1.25).unwrap();
    let bau = BauGrid::new(dom, 0.25).unwrap();
    let mut worst = 0.0f64;
    for p in [
        FrkParams { beta0: 0.3, tau: vec![2.0, 5.0], rho: vec![0.5, 0.8], sigma2_xi: 0.02 },
        FrkParams { beta0: -0.2, tau: vec![0.4, 1.5], rho: vec![0.05, 0.97], sigma2_xi: 0.004 },
    ] {
        let got = frk::laplace_log_marginal(&recs, &spec, &basis, &bau, &p).unwrap();
        let n = recs.len();
        let cell: Vec<usize> = recs.iter().map(|r| bau.bau_of(r.loc).unwrap()).collect();
        let phi = DMatrix::from_fn(n, basis.len(), |i, l| basis.eval_at(bau.centroid(cell[i]))[l]);
        let kinv = car_precision(&basis, &p).try_inverse().unwrap();
        let mut cov = &phi * kinv * phi.transpose();
        for i in 0..n {
            for j in 0..n {
                if cell[i] == cell[j] {
                    cov[(i, j)] += p.sigma2_xi;
                }
            }
            cov[(i, i)] += noise;
        }
        let y = DVector::from_iterator(n, recs.iter().map(|r| r.prevalence() - p.beta0));
        let want = gaussian_marginal(&y, cov);
        worst = worst.max((got - want).abs() / want.abs());
    }
    worst
}

/// `(tau / h^2) (kappa^2 h^2 I + G)^2` with `G` the 4-neighbour graph Laplacian.
fn matern_precision(lat: &Lattice, kappa: f64, tau: f64) -> DMatrix<f64> {
    let n = lat.nx * lat.ny;
    let h = lat.cell;
    let mut m = DMatrix::identity(n, n) * (kappa * kappa * h * h);
    for j in 0..lat.ny {
        for i in 0..lat.nx {
            let a = j * lat.nx + i;
            if i + 1 < lat.nx {
                let b = a + 1;
                m[(a, a)] += 1.0;
                m[(b, b)] += 1.0;
                m[(a, b)] -= 1.0;
                m[(b, a)] -= 1.0;
            }
            if j + 1 < lat.ny {
                let b = a + lat.nx;
                m[(a, a)] += 1.0;
                m[(b, b)] += 1.0;
                m[(a, b)] -= 1.0;
                m[(b, a)] -= 1.0;
            }
        }
    }
    &m * &m * (tau / (h * h))
}

/// Bilinear weights of `p` on the lattice nodes.
fn bilinear_row(lat: &Lattice, p: Location) -> Vec<(usize, f64)> {
    let fx = (p.lon - lat.origin.lon) / lat.cell;
    let fy = (p.lat - lat.origin.lat) / lat.cell;
    let i = (fx.floor() as usize).min(lat.nx - 2);
    let j = (fy.floor() as usize).min(lat.ny - 2);
    let (s, t) = (fx - i as f64, fy - j as f64);
    vec![
        (j * lat.nx + i, (1.0 - s) * (1.0 - t)),
        (j * lat.nx + i + 1, s * (1.0 - t)),
        ((j + 1) * lat.nx + i, (1.0 - s) * t),
        ((j + 1) * lat.nx + i + 1, s * t),
    ]
}

fn lgm_gaussian_gaps() -> (f64, f64) {
    let lat = Lattice {
        origin: Location { lon: -1.0, lat: -1.0 },
        cell: 0.5,
        nx: 9,
        ny: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let recs: Vec<SurveyRecord> = (0..50)
        .map(|_| {
            let loc = Location {
                lon: rng.random_range(0.0..3.0),
                lat: rng.random_range(0.0..2.5),
            };
            SurveyRecord::new(loc, 60, rng.random_range(3..40)).unwrap()
        })
        .collect();
    let hyper = LgmHyper {
        kappa: 1.1,
        field_variance: 0.08,
        phi: None,
        noise_variance: Some(0.005),
    };
    let (lml, mode) = lgm::laplace_log_marginal(&recs, LgmResponse::Gaussian, lat, &hyper).unwrap();

    let n = lat.nx * lat.ny;
    let m = recs.len();
    let tau = 1.0 / (4.0 * std::f64::consts::PI * hyper.kappa.powi(2) * hyper.field_variance);
    // latent = nodes then the intercept, which has precision 1e-6
    let mut prior = DMatrix::zeros(n + 1, n + 1);
    prior.view_mut((0, 0), (n, n)).copy_from(&matern_precision(&lat, hyper.kappa, tau));
    prior[(n, n)] = 1e-6;
    let mut b = DMatrix::zeros(m, n + 1);
    for (i, r) in recs.iter().enumerate() {
        for (k, w) in bilinear_row(&lat, r.loc) {
            b[(i, k)] += w;
        }
        b[(i, n)] = 1.0;
    }
    let v = 0.005;
    let y = DVector::from_iterator(m, recs.iter().map(|r| r.prevalence()));
    let post = &prior + b.transpose() * &b / v;
    let want = post.cholesky().unwrap().solve(&(b.transpose() * &y / v));
    let scale = want.amax();
    let mode_gap = mode.iter().zip(want.iter()).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max) / scale;
    let cov = &b * prior.try_inverse().unwrap() * b.transpose() + DMatrix::identity(m, m) * v;
    let exact = gaussian_marginal(&y, cov);
    (mode_gap, (lml - exact).abs() / exact.abs())
}

#[test]
fn criterion_02_laplace_exactness() {
    let t = Instant::now();
    let frk_gap = frk_gaussian_gap();
    let (lgm_mode_gap, lgm_gap) = lgm_gaussian_gaps();
    let pass = frk_gap < 1e-6 && lgm_gap < 1e-6 && lgm_mode_gap < 1e-6 && within(t, Duration::from_secs(30));
    report(
        2,
        "laplace exactness",
        pass,
        format!(
            "frk marginal rel gap {frk_gap:.2e}, lgm marginal rel gap {lgm_gap:.2e}, lgm mode rel gap {lgm_mode_gap:.2e}, {:.2}s",
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

fn overdispersion_data(noise_sd: f64, seed: u64) -> Vec<SurveyRecord> {
    let truth = surface_raster(Location { lon: 0.0, lat: 0.0 }, 0.05, 80, 80, |l| {
        inv_logit(-1.0 + 1.2 * (1.5 * l.lon).sin() * (1.5 * l.lat).cos())
    });
    simulate(&SimConfig {
        raster: truth,
        locations: SiteSpec::Uniform(300),
        tests_per_site: TestsPerSite::Constant(85),
        noise_sd,
        seed,
    })
    .unwrap()
    .records
}

const NOISE: [f64; 3] = [0.0, 0.4, 1.2];

fn domain() -> BoundingBox {
    BoundingBox::new(Location { lon: 0.0, lat: 0.0 }, Location { lon: 4.0, lat: 4.0 })
}

fn min_distance(p: Location, recs: &[SurveyRecord]) -> f64 {
    recs.iter()
        .map(|r| ((r.loc.lon - p.lon).powi(2) + (r.loc.lat - p.lat).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_03_overdispersion_mechanism() {
    let t = Instant::now();
    let mut ranges = Vec::new();
    let mut noisiest = None;
    for (k, &s) in NOISE.iter().enumerate() {
        let recs = overdispersion_data(s, 40 + k as u64);
        let fit = lgm::fit(&recs, &lattice_spec(LgmResponse::Binomial), domain()).unwrap();
        ranges.push(fit.range_diagnostic().practical_range);
        noisiest = Some((fit, recs));
    }
    let (fit, recs) = noisiest.unwrap();
    let min_range = ranges.iter().copied().fold(f64::INFINITY, f64::min);
    let far = [Location { lon: -3.0, lat: 2.0 }, Location { lon: 7.5, lat: 7.5 }];
    let mut far_gap = 0.0f64;
    for p in far {
        assert!(min_distance(p, &recs) > 3.0 * min_range);
        let pred = fit.predict(&[p]).unwrap()[0];
        far_gap = far_gap.max((pred.median - inv_logit(fit.beta0)).abs());
    }
    let decreasing = ranges.windows(2).all(|w| w[1] < w[0]);
    let pass = decreasing && far_gap <= 0.02 && within(t, Duration::from_secs(600));
    report(
        3,
        "overdispersion mechanism",
        pass,
        format!(
            "practical ranges {ranges:.4?} at noise {NOISE:?}, far-point gap {far_gap:.2e}, {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_beta_binomial_fix() {
    let t = Instant::now();
    let recs = overdispersion_data(NOISE[2], 42);
    let bin = lgm::fit(&recs, &lattice_spec(LgmResponse::Binomial), domain()).unwrap();
    let bb = lgm::fit(&recs, &lattice_spec(LgmResponse::BetaBinomial), domain()).unwrap();
    let (rb, rbb) = (bin.range_diagnostic().practical_range, bb.range_diagnostic().practical_range);
    let pass = rbb >= 2.0 * rb && within(t, Duration::from_secs(600));
    report(
        4,
        "beta-binomial fix",
        pass,
        format!(
            "range binomial {rb:.4}, beta-binomial {rbb:.4} (phi {:.3}), {:.0}s",
            bb.hyper.phi.unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_coverage_metrics() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let yhat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let sd: Vec<f64> = (0..n)
        .map(|i| if i % 50 == 0 { 0.0 } else { rng.random_range(0.0..0.4) })
        .collect();

    let mut agree = true;
    let (mut c1, mut c2x, mut c2) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let inside = |k: f64| {
            let lo = if yhat[i] - k * sd[i] < 0.0 { 0.0 } else { yhat[i] - k * sd[i] };
            let hi = if yhat[i] + k * sd[i] > 1.0 { 1.0 } else { yhat[i] + k * sd[i] };
            lo <= y[i] && y[i] <= hi
        };
        let (w1, w2) = (inside(1.0), inside(2.0));
        let c = interval_coverage(y[i], yhat[i], sd[i]);
        agree &= c.within1 == w1 && c.within2_cumulative == w2 && c.within2_exclusive == (w2 && !w1);
        c1 += w1 as usize;
        c2 += w2 as usize;
        c2x += (w2 && !w1) as usize;
    }
    let rep = metrics(&y, &yhat, &sd).unwrap();
    let mut sq = 0.0;
    for i in 0..n {
        sq += (y[i] - yhat[i]).powi(2);
    }
    let mut width = 0.0;
    for s in &sd {
        width += s;
    }
    agree &= rep.n == n;
    agree &= rep.rmse == (sq / n as f64).sqrt();
    agree &= rep.pct_within_1sd == 100.0 * c1 as f64 / n as f64;
    agree &= rep.pct_within_2sd_exclusive == 100.0 * c2x as f64 / n as f64;
    agree &= rep.pct_within_2sd_cumulative == 100.0 * c2 as f64 / n as f64;
    agree &= rep.width_mean == width / n as f64;
    for (k, &th) in ERROR_THRESHOLDS.iter().enumerate() {
        let cnt = (0..n).filter(|&i| (y[i] - yhat[i]).abs() < th).count();
        agree &= rep.prop_abs_error_below[k] == (th, cnt as f64 / n as f64);
    }

    let a = interval_coverage(0.5, 0.5, 0.1);
    let b = interval_coverage(0.7, 0.5, 0.1);
    let c = interval_coverage(1.0, 0.95, 0.1);
    let examples = a.within1 && !b.within1 && b.within2_exclusive && c.within1;
    let pass = agree && examples && within(t, Duration::from_secs(5));
    report(
        5,
        "coverage metrics",
        pass,
        format!("brute force agrees: {agree}, worked examples: {examples}, {:.2}s", t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_06_sprf_banding() {
    let t = Instant::now();
    let centre = Location { lon: 36.8, lat: -1.3 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // high prevalence at the core, zeros on the rim of the cluster
    let recs: Vec<SurveyRecord> = (0..40)
        .map(|i| {
            let (a, r) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..0.05));
            let loc = Location {
                lon: centre.lon + r * a.cos(),
                lat: centre.lat + r * a.sin(),
            };
            let h = if r < 0.025 { 50 + i } else { 0 };
            SurveyRecord::new(loc, 100, h).unwrap()
        })
        .collect();
    let fit = sprf::fit(&recs, &SprfSpec { seed: 6, ..Default::default() }).unwrap();
    let mut worst = 0.0f64;
    for radius in [0.5, 1.0, 2.0] {
        let ring: Vec<Location> = (0..36)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 36.0;
                Location {
                    lon: centre.lon + radius * a.cos(),
                    lat: centre.lat + radius * a.sin(),
                }
            })
            .collect();
        let pred = fit.predict(&ring);
        let m = pred.iter().map(|p| p.median).sum::<f64>() / 36.0;
        let sd = (pred.iter().map(|p| (p.median - m).powi(2)).sum::<f64>() / 36.0).sqrt();
        worst = worst.max(sd);
    }
    let pass = worst < 1e-12 && within(t, Duration::from_secs(60));
    report(
        6,
        "sprf banding",
        pass,
        format!("max sd across rings {worst:.2e}, {:.2}s", t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_07_recovery() {
    let t = Instant::now();
    let recs = uniform_survey(&two_bump_raster(), 500, 0.0, 7);
    let pts: Vec<Location> = recs.iter().map(|r| r.loc).collect();
    let folds = kmeans_folds(&pts, 10, 7).unwrap();
    let y: Vec<f64> = recs.iter().map(SurveyRecord::prevalence).collect();
    let rmse = |m: &ModelConfig| {
        let out = cv_run(&recs, m, &folds).unwrap();
        assert!(out.failed_folds.is_empty(), "{}: {:?}", m.name(), out.failed_folds);
        let se: f64 = out
            .predictions
            .iter()
            .zip(&y)
            .map(|(p, y)| (p.unwrap().estimate - y).powi(2))
            .sum();
        (se / y.len() as f64).sqrt()
    };
    let baseline = rmse(&ModelConfig::ConstantMean);
    let models = [
        ModelConfig::Gp(gp_spec()),
        ModelConfig::Sprf(SprfSpec { seed: 7, ..Default::default() }),
        ModelConfig::Frk(FrkSpec { seed: 7, ..Default::default() }),
        ModelConfig::Lgm(lattice_spec(LgmResponse::Binomial)),
    ];
    let scores: Vec<(&str, f64)> = models.iter().map(|m| (m.name(), rmse(m))).collect();
    let pass = scores.iter().all(|(_, s)| *s < baseline) && within(t, Duration::from_secs(1200));
    report(
        7,
        "recovery",
        pass,
        format!("blocked 10-fold rmse {scores:.4?} vs constant {baseline:.4}, {:.0}s", t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_08_scaling_shape() {
    let t = Instant::now();
    let models = [
        ModelConfig::Gp(gp_spec()),
        ModelConfig::Frk(FrkSpec::default()),
        ModelConfig::Lgm(lattice_spec(LgmResponse::Binomial)),
        ModelConfig::Sprf(SprfSpec::default()),
    ];
    let rep: BenchReport = bench_scaling(&models, &[500, 1000, 2000], &two_bump_raster(), 8, &BenchOptions::default()).unwrap();
    for r in &rep.runs {
        println!(
            "  {} n={} fit {:.2}s predict {:.2}s peak rss {:?}",
            r.model,
            r.n_records,
            r.fit_time_s.unwrap_or(f64::NAN),
            r.predict_time_s.unwrap_or(f64::NAN),
            r.peak_rss_bytes
        );
    }
    let slope = |m: &str| rep.fit_time_slope(m).unwrap_or(f64::NAN);
    let (gp, frk, lgm, sprf) = (slope("gp-exact"), slope("frk"), slope("lgm"), slope("sprf"));
    let ordering = gp > frk && gp > lgm;
    let sprf_linear = (0.7..=1.6).contains(&sprf);
    let pass = ordering && sprf_linear && within(t, Duration::from_secs(3600));
    report(
        8,
        "scaling shape",
        pass,
        format!(
            "log-log fit-time slopes gp-exact {gp:.2}, frk {frk:.2}, lgm {lgm:.2}, sprf {sprf:.2}; ordering holds: {ordering}, sprf within [0.7, 1.6]: {sprf_linear}, {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_monte_carlo_stability() {
    let t = Instant::now();
    let recs = uniform_survey(&two_bump_raster(), 300, 0.0, 9);
    let spec = FrkSpec {
        bau_cell_size: 0.2,
        seed: 9,
        ..Default::default()
    };
    let mut model = frk::fit(&recs, &spec, two_bump_raster().bbox()).unwrap();
    let baus: Vec<usize> = (0..model.bau.len()).collect();
    let small = model.predict_baus(&baus, 400, 1.0).unwrap();
    model.spec.seed = 90;
    let large = model.predict_baus(&baus, 40_000, 1.0).unwrap();
    let ok = small
        .iter()
        .zip(&large)
        .filter(|(s, l)| (s.mean - l.mean).abs() <= 3.0 * l.sd / 400f64.sqrt())
        .count();
    let frac = ok as f64 / baus.len() as f64;
    let pass = frac >= 0.95 && within(t, Duration::from_secs(600));
    report(
        9,
        "monte carlo stability",
        pass,
        format!("{ok}/{} BAUs within 3 standard errors, {:.1}s", baus.len(), t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

fn run_cli(cmd: &str, config: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_prevmap"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success(), "{cmd} failed");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let bytes = if name == "bench.json" {
                let rep: BenchReport = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
                serde_json::to_vec(&rep.without_timings()).unwrap()
            } else {
                fs::read(&p).unwrap()
            };
            (name, bytes)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_10_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    two_bump_raster().write_ascii(d.join("truth.asc")).unwrap();
    let configs = [
        ("simulate", json!({"input": {"raster": "truth.asc"}, "simulate": {"sites": 200}, "seed": 10})),
        ("fit", json!({"sprf": {"num_trees": 50}, "input": {"records": "survey.csv"}, "seed": 10})),
        ("fit", json!({"frk": {"bau_cell_size": 0.2}, "input": {"records": "survey.csv"}, "grid": {"raster": "truth.asc"}, "seed": 10})),
        ("predict", json!({"input": {"model": "frk_model.json"}, "grid": {"raster": "truth.asc"}, "seed": 10})),
        ("cv", json!({"sprf": {"num_trees": 50}, "input": {"records": "survey.csv"}, "cv": {"k": 5}, "seed": 10})),
        (
            "bench",
            json!({"input": {"raster": "truth.asc"}, "bench": {"models": [{"frk": {"bau_cell_size": 0.2}}, {"sprf": {"num_trees": 20}}, "constant_mean"], "sizes": [100, 200]}, "seed": 10}),
        ),
    ];
    let mut mismatched = Vec::new();
    for (i, (cmd, cfg)) in configs.iter().enumerate() {
        let path = d.join(format!("cfg{i}.json"));
        fs::write(&path, cfg.to_string()).unwrap();
        let (a, b) = (d.join(format!("run{i}a")), d.join(format!("run{i}b")));
        run_cli(cmd, &path, &a);
        run_cli(cmd, &path, &b);
        if files(&a) != files(&b) {
            mismatched.push(format!("{cmd}#{i}"));
        }
        // later steps read the first run's artifacts
        if *cmd == "simulate" {
            fs::copy(a.join("survey.csv"), d.join("survey.csv")).unwrap();
        }
        if cfg.get("frk").is_some() {
            fs::copy(a.join("model.json"), d.join("frk_model.json")).unwrap();
        }
    }
    let pass = mismatched.is_empty() && within(t, Duration::from_secs(600));
    report(
        10,
        "determinism",
        pass,
        format!("{} subcommand runs repeated, mismatches {mismatched:?}, {:.1}s", configs.len(), t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}
