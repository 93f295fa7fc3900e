use std::time::Instant;

use prevmap::frk::{fit, BauGrid, FrkSpec};
use prevmap::geodata::{BoundingBox, Location, Raster, SurveyRecord};
use prevmap::simkit::{inv_logit, simulate, SimConfig, SiteSpec, TestsPerSite};

fn surface(l: Location) -> f64 {
    inv_logit(-1.0 + 1.3 * (1.2 * l.lon).sin() * (0.9 * l.lat).cos())
}

fn truth() -> Raster {
    let base = Raster::new(Location { lon: 0.0, lat: 0.0 }, 0.1, 40, 40).unwrap();
    base.with_values(base.cell_centres().iter().map(|l| surface(*l)).collect()).unwrap()
}

fn survey(n: usize, seed: u64) -> Vec<SurveyRecord> {
    simulate(&SimConfig {
        raster: truth(),
        locations: SiteSpec::Uniform(n),
        tests_per_site: TestsPerSite::Constant(50),
        noise_sd: 0.0,
        seed,
    })
    .unwrap()
    .records
}

fn spec(nres: usize) -> FrkSpec {
    FrkSpec {
        nres,
        bau_cell_size: 0.2,
        ..Default::default()
    }
}

#[test]
fn beats_constant_model() {
    let recs = survey(400, 1);
    let dom = truth().bbox();
    let model = fit(&recs, &spec(2), dom).unwrap();
    let grid = truth().cell_centres();
    let pred = model.predict(&grid).unwrap();
    let pooled = recs.iter().map(|r| r.positive as f64).sum::<f64>() / recs.iter().map(|r| r.examined as f64).sum::<f64>();
    let rmse = |f: &dyn Fn(usize) -> f64| {
        (grid.iter().enumerate().map(|(i, l)| (f(i) - surface(*l)).powi(2)).sum::<f64>() / grid.len() as f64).sqrt()
    };
    let model_rmse = rmse(&|i| pred[i].mean);
    let const_rmse = rmse(&|_| pooled);
    println!("rmse: frk {model_rmse:.4}, constant {const_rmse:.4}");
    assert!(model_rmse < const_rmse);
}

#[test]
fn monte_carlo_means_are_stable() {
    let recs = survey(200, 2);
    let mut model = fit(&recs, &spec(1), truth().bbox()).unwrap();
    let baus: Vec<usize> = (0..model.bau.len()).collect();
    let small = model.predict_baus(&baus, 400, 1.0).unwrap();
    model.spec.seed = 99;
    let large = model.predict_baus(&baus, 40_000, 1.0).unwrap();
    let ok = small
        .iter()
        .zip(&large)
        .filter(|(s, l)| (s.mean - l.mean).abs() <= 3.0 * l.sd / 20.0)
        .count();
    let frac = ok as f64 / baus.len() as f64;
    println!("{ok}/{} BAUs within 3 standard errors", baus.len());
    assert!(frac >= 0.95);
}

#[test]
fn every_observation_maps_to_one_bau() {
    let bbox = BoundingBox::new(Location { lon: 0.0, lat: 0.0 }, Location { lon: 2.0, lat: 1.0 });
    let grid = BauGrid::new(bbox, 0.25).unwrap();
    // points on interior cell edges and the outer corners
    let mut pts = Vec::new();
    for i in 0..=8 {
        for j in 0..=4 {
            pts.push(Location {
                lon: 0.25 * i as f64,
                lat: 0.25 * j as f64,
            });
        }
    }
    let mut counts = vec![0usize; grid.len()];
    for p in &pts {
        let b = grid.bau_of(*p).unwrap();
        counts[b] += 1;
        let c = grid.centroid(b);
        assert!((c.lon - p.lon).abs() <= 0.125 + 1e-12 && (c.lat - p.lat).abs() <= 0.125 + 1e-12);
    }
    // each observation contributes a single unit row
    assert_eq!(counts.iter().sum::<usize>(), pts.len());
}

#[test]
fn fit_time_grows_with_basis_count() {
    let recs = survey(300, 3);
    let time = |nres: usize| {
        let t = Instant::now();
        let m = fit(&recs, &spec(nres), truth().bbox()).unwrap();
        (t.elapsed().as_secs_f64(), m.basis.len())
    };
    let (t1, r1) = time(1);
    let (t3, r3) = time(3);
    println!("r = {r1}: {t1:.3}s, r = {r3}: {t3:.3}s");
    assert!(r3 > r1);
    assert!(t3 >= t1);
}

/// Lag-`k` autocorrelation of a transect.
fn autocorrelation(v: &[f64], k: usize) -> f64 {
    let n = v.len();
    let m = v.iter().sum::<f64>() / n as f64;
    let var: f64 = v.iter().map(|x| (x - m).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    (0..n - k).map(|i| (v[i] - m) * (v[i + k] - m)).sum::<f64>() / var
}

#[test]
fn oscillation_in_data_gap_is_reported() {
    // two clusters at opposite ends, nothing in between
    let mut recs = survey(600, 4);
    recs.retain(|r| r.loc.lon < 0.8 || r.loc.lon > 3.2);
    let model = fit(&recs, &spec(2), truth().bbox()).unwrap();
    let step = 0.05;
    let transect: Vec<Location> = (0..=48).map(|i| Location { lon: 0.8 + step * i as f64, lat: 2.0 }).collect();
    let p = model.predict_mc(&transect, 50, 0.0).unwrap();
    let v: Vec<f64> = p.iter().map(|x| x.mean).collect();
    let r2 = model.basis.range_of(1);
    let spacing = model.basis.centres[r2.start + 1].lon - model.basis.centres[r2.start].lon;
    let acf: Vec<f64> = (1..24).map(|k| autocorrelation(&v, k)).collect();
    let peak = (1..acf.len() - 1).find(|&i| acf[i] > acf[i - 1] && acf[i] >= acf[i + 1]);
    println!(
        "resolution-2 spacing {spacing:.3}; first autocorrelation peak at lag {:?}; acf {:?}",
        peak.map(|i| (i + 1) as f64 * step),
        acf.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    assert!(v.iter().all(|x| x.is_finite()));
}
