//! Spatial random forest: a quantile regression forest whose features are the
//! distances from each location to every training location.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cart::{FeatureMatrix, Tree, TreeParams};
use crate::error::{Error, Result};
use crate::exec::{par_map, stream_rng};
use crate::geodata::{distance, DistanceMetric, Location, SurveyRecord};

/// IQR of a standard normal.
pub const NORMAL_IQR: f64 = 1.34898;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SprfSpec {
    pub num_trees: usize,
    /// Columns tried per split; `None` means `floor(sqrt(n))`.
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub metric: DistanceMetric,
    pub seed: u64,
    /// Grow each tree on a bootstrap resample (otherwise on all records once).
    pub bootstrap: bool,
}

impl Default for SprfSpec {
    fn default() -> Self {
        SprfSpec {
            num_trees: 500,
            mtry: None,
            min_node_size: 5,
            metric: DistanceMetric::GreatCircle,
            seed: 0,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SprfFit {
    trees: Vec<Tree>,
    pts: Vec<Location>,
    y: Vec<f64>,
    metric: DistanceMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprfPrediction {
    pub median: f64,
    pub mean: f64,
    pub q25: f64,
    pub q75: f64,
    pub sd: f64,
}

/// `|query| x |train|` matrix of distances (row-major).
pub fn build_features(train: &[Location], query: &[Location], metric: DistanceMetric) -> Result<Vec<Vec<f64>>> {
    if train.is_empty() {
        return Err(Error::invalid("need at least one training location"));
    }
    Ok(query
        .iter()
        .map(|q| train.iter().map(|t| distance(*q, *t, metric)).collect())
        .collect())
}

/// Normal-theory sd from an interquartile range.
pub fn sd_from_iqr(q25: f64, q75: f64) -> Result<f64> {
    if !(q75 >= q25) {
        return Err(Error::invalid(format!("q75 ({q75}) below q25 ({q25})")));
    }
    Ok((q75 - q25) / NORMAL_IQR)
}

pub fn fit(records: &[SurveyRecord], spec: &SprfSpec) -> Result<SprfFit> {
    let pts: Vec<Location> = records.iter().map(|r| r.loc).collect();
    let y: Vec<f64> = records.iter().map(SurveyRecord::prevalence).collect();
    fit_xy(&pts, &y, spec)
}

pub fn fit_xy(pts: &[Location], y: &[f64], spec: &SprfSpec) -> Result<SprfFit> {
    let n = pts.len();
    if n < 2 || y.len() != n {
        return Err(Error::invalid("forest needs at least 2 records with one response each"));
    }
    if spec.num_trees == 0 || spec.min_node_size == 0 {
        return Err(Error::invalid("num_trees and min_node_size must be positive"));
    }
    let mtry = spec.mtry.unwrap_or(((n as f64).sqrt().floor() as usize).max(1));
    if mtry == 0 || mtry > n {
        return Err(Error::invalid(format!("mtry {mtry} must lie in 1..={n}")));
    }
    let columns = (0..n)
        .map(|j| pts.iter().map(|p| distance(*p, pts[j], spec.metric)).collect())
        .collect();
    let x = FeatureMatrix::from_columns(n, columns);
    let params = TreeParams {
        mtry,
        min_node_size: spec.min_node_size,
        min_leaf: 1,
        max_depth: None,
        max_leaves: None,
    };
    let trees = par_map((0..spec.num_trees as u64).collect(), |t| {
        let mut rng = stream_rng(spec.seed, t);
        let samples: Vec<u32> = if spec.bootstrap {
            let mut s: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
            // ascending indices keep column reads sequential in every node
            s.sort_unstable();
            s
        } else {
            (0..n as u32).collect()
        };
        Tree::grow(&x, y, samples, &params, &mut rng)
    });
    Ok(SprfFit {
        trees,
        pts: pts.to_vec(),
        y: y.to_vec(),
        metric: spec.metric,
    })
}

impl SprfFit {
    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    /// Pooled leaf-cohabitation weights, one per training record, summing to 1.
    pub fn weights(&self, q: Location) -> Vec<f64> {
        let feat: Vec<f64> = self.pts.iter().map(|p| distance(q, *p, self.metric)).collect();
        let mut w = vec![0.0; self.pts.len()];
        let per_tree = 1.0 / self.trees.len() as f64;
        for tree in &self.trees {
            let samples = tree.leaf_samples(tree.leaf_index(|j| feat[j]));
            let share = per_tree / samples.len() as f64;
            for &i in samples {
                w[i as usize] += share;
            }
        }
        w
    }

    fn distribution(&self, q: Location) -> Vec<(f64, f64)> {
        let mut d: Vec<(f64, f64)> = self
            .weights(q)
            .into_iter()
            .enumerate()
            .filter(|(_, w)| *w > 0.0)
            .map(|(i, w)| (self.y[i], w))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        d
    }

    fn quantile(dist: &[(f64, f64)], p: f64) -> f64 {
        let total: f64 = dist.iter().map(|v| v.1).sum();
        let target = p * total * (1.0 - 1e-12);
        let mut cum = 0.0;
        for &(y, w) in dist {
            cum += w;
            if cum >= target {
                return y;
            }
        }
        dist.last().map_or(f64::NAN, |v| v.0)
    }

    pub fn predict_quantiles(&self, pts: &[Location], probs: &[f64]) -> Result<Vec<Vec<f64>>> {
        if probs.is_empty() {
            return Err(Error::invalid("probs must not be empty"));
        }
        if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || probs.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("probs must be sorted and inside (0, 1)"));
        }
        Ok(par_map(pts.to_vec(), |q| {
            let d = self.distribution(q);
            probs.iter().map(|&p| Self::quantile(&d, p)).collect()
        }))
    }

    /// Median, pooled mean, quartiles and IQR-derived sd.
    pub fn predict(&self, pts: &[Location]) -> Vec<SprfPrediction> {
        par_map(pts.to_vec(), |q| {
            let d = self.distribution(q);
            let q25 = Self::quantile(&d, 0.25);
            let q75 = Self::quantile(&d, 0.75);
            SprfPrediction {
                median: Self::quantile(&d, 0.5),
                mean: d.iter().map(|(y, w)| y * w).sum::<f64>() / d.iter().map(|v| v.1).sum::<f64>(),
                q25,
                q75,
                sd: (q75 - q25) / NORMAL_IQR,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pts(n: usize, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Location {
                lon: rng.random_range(30.0..35.0),
                lat: rng.random_range(-3.0..2.0),
            })
            .collect()
    }

    fn small_spec(trees: usize) -> SprfSpec {
        SprfSpec {
            num_trees: trees,
            ..Default::default()
        }
    }

    #[test]
    fn features_are_distances() {
        let train = random_pts(7, 1);
        let query = random_pts(5, 2);
        let f = build_features(&train, &query, DistanceMetric::GreatCircle).unwrap();
        for (i, row) in f.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, distance(query[i], train[j], DistanceMetric::GreatCircle));
            }
        }
        let same = build_features(&train, &train, DistanceMetric::Euclidean).unwrap();
        assert_eq!(same, crate::geodata::distance_matrix(&train, DistanceMetric::Euclidean));
        let one = [Location { lon: 1.0, lat: 1.0 }];
        assert_eq!(build_features(&one, &one, DistanceMetric::Euclidean).unwrap(), vec![vec![0.0]]);
        assert!(build_features(&[], &one, DistanceMetric::Euclidean).is_err());
    }

    #[test]
    fn iqr_sd() {
        assert!((sd_from_iqr(0.0, 1.34898).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sd_from_iqr(0.3, 0.3).unwrap(), 0.0);
        assert!((sd_from_iqr(0.1, 0.1 + 0.26980).unwrap() - 0.2).abs() < 1e-5);
        assert!(sd_from_iqr(0.5, 0.4).is_err());
    }

    #[test]
    fn constant_response() {
        let pts = random_pts(30, 3);
        let fit = fit_xy(&pts, &[0.3; 30], &small_spec(20)).unwrap();
        for q in fit.predict_quantiles(&random_pts(10, 4), &[0.1, 0.5, 0.9]).unwrap() {
            assert_eq!(q, vec![0.3; 3]);
        }
    }

    #[test]
    fn two_points_recovered_in_bag() {
        let pts = [Location { lon: 30.0, lat: 0.0 }, Location { lon: 31.0, lat: 0.0 }];
        let spec = SprfSpec {
            num_trees: 50,
            min_node_size: 1,
            bootstrap: false,
            ..Default::default()
        };
        let fit = fit_xy(&pts, &[0.1, 0.8], &spec).unwrap();
        let p = fit.predict(&pts);
        assert_eq!(p[0].median, 0.1);
        assert_eq!(p[1].median, 0.8);
    }

    #[test]
    fn single_leaf_gives_empirical_quantiles() {
        let pts = random_pts(11, 5);
        let y: Vec<f64> = (0..11).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let spec = SprfSpec {
            num_trees: 1,
            min_node_size: 100,
            bootstrap: false,
            ..Default::default()
        };
        let fit = fit_xy(&pts, &y, &spec).unwrap();
        let mut sorted = y.clone();
        sorted.sort_by(f64::total_cmp);
        let probs = [0.1, 0.25, 0.5, 0.75, 0.95];
        let got = &fit.predict_quantiles(&[pts[0]], &probs).unwrap()[0];
        for (p, g) in probs.iter().zip(got) {
            // inverse empirical CDF: smallest y with F(y) >= p
            let k = ((p * 11.0) as f64).ceil() as usize;
            assert_eq!(*g, sorted[k - 1], "p={p}");
        }
    }

    #[test]
    fn seeded_fits_are_identical() {
        let pts = random_pts(40, 6);
        let y: Vec<f64> = pts.iter().map(|p| (p.lon - 30.0) / 5.0).collect();
        let a = fit_xy(&pts, &y, &small_spec(30)).unwrap().predict(&random_pts(15, 7));
        let b = fit_xy(&pts, &y, &small_spec(30)).unwrap().predict(&random_pts(15, 7));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_probs() {
        let pts = random_pts(5, 8);
        let fit = fit_xy(&pts, &[0.1, 0.2, 0.3, 0.4, 0.5], &small_spec(3)).unwrap();
        assert!(fit.predict_quantiles(&pts, &[]).is_err());
        assert!(fit.predict_quantiles(&pts, &[0.7, 0.2]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn quantiles_monotone_and_in_support(seed in 0u64..1000) {
            let pts = random_pts(40, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let y: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
            let fit = fit_xy(&pts, &y, &small_spec(25)).unwrap();
            for q in fit.predict_quantiles(&random_pts(20, seed + 2), &[0.25, 0.5, 0.75]).unwrap() {
                prop_assert!(q[0] <= q[1] && q[1] <= q[2]);
                for v in q {
                    prop_assert!(y.contains(&v));
                }
            }
        }
    }
}
