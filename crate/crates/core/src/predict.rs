//! Next-period prediction, residual deviance and top-k recommendation.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, ParameterSet, SparseRow};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Personal purchase counts, ties broken at random.
    Hist,
    /// Predicted probabilities.
    Prop,
    /// Personal counts, ties broken by overall item popularity.
    HistHist,
    /// Personal counts, ties broken by predicted probabilities.
    HistProp,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Hist,
        Strategy::Prop,
        Strategy::HistHist,
        Strategy::HistProp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Hist => "hist",
            Strategy::Prop => "prop",
            Strategy::HistHist => "hist-hist",
            Strategy::HistProp => "hist-prop",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "hist" => Ok(Strategy::Hist),
            "prop" => Ok(Strategy::Prop),
            "hist-hist" | "histhist" => Ok(Strategy::HistHist),
            "hist-prop" | "histprop" => Ok(Strategy::HistProp),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendationConfig {
    pub strategy: Strategy,
    pub top_k: usize,
    pub tie_seed: u64,
}

/// Predicted means for period `T + 1`.
///
/// The last period's intercepts, coefficients, loadings and time covariates
/// stand in for the unknown next-period values; linear-in-time intercepts are
/// extrapolated to `(T + 1) γ_j`. For binary items these are probabilities.
pub fn predict_proba_next(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
) -> Result<DMatrix<f64>> {
    let layout = spec.layout(dataset)?;
    params.check(dataset, &layout)?;
    let (n, n_items, k, p_len) = (
        dataset.n_persons(),
        dataset.n_items(),
        layout.n_factors,
        layout.len(),
    );
    let last = dataset.n_times() - 1;
    let items = params.item_rows();
    let theta = params.theta_rows();
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    let mut out = DMatrix::zeros(n, n_items);
    for i in 0..n {
        layout.fill_row(
            dataset.covariate_row(i),
            dataset.time_covariate_row(i, last),
            &theta[i * k..(i + 1) * k],
            last,
            &mut row,
        );
        for j in 0..n_items {
            let u = &items[j * p_len..(j + 1) * p_len];
            let mut eta = row.dot(u);
            if layout.linear_intercept {
                eta += u[0];
            }
            out[(i, j)] = dataset.family(j).mean(eta);
        }
    }
    Ok(out)
}

/// Bernoulli residual deviance of `probs` against the responses at time `t`.
///
/// Returns per-item values and their total. Probabilities are clipped to
/// `[1e-12, 1 − 1e-12]`.
pub fn residual_deviance(
    dataset: &Dataset,
    probs: &DMatrix<f64>,
    t: usize,
) -> Result<(Vec<f64>, f64)> {
    if t >= dataset.n_times() {
        return Err(Error::Config(format!("time {t} out of range")));
    }
    if probs.shape() != (dataset.n_persons(), dataset.n_items()) {
        return Err(Error::Config(
            "probability matrix does not match the dataset".into(),
        ));
    }
    let mut per_item = vec![0.0; dataset.n_items()];
    let mut clipped = 0usize;
    for i in 0..dataset.n_persons() {
        if !dataset.is_observed(i, t) {
            continue;
        }
        for (j, d) in per_item.iter_mut().enumerate() {
            let raw = probs[(i, j)];
            let p = raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            if p != raw {
                clipped += 1;
            }
            let y = dataset.response(i, j, t);
            *d += -2.0 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
    }
    if clipped > 0 {
        log::warn!("{clipped} probabilities clipped to [{PROB_FLOOR:e}, 1 - {PROB_FLOOR:e}]");
    }
    let total = per_item.iter().sum();
    Ok((per_item, total))
}

/// Top-`k` item indices (zero-based) for every person.
pub fn recommend(
    config: &RecommendationConfig,
    history_counts: &DMatrix<u32>,
    probs: &DMatrix<f64>,
) -> Result<Vec<Vec<usize>>> {
    let (n, n_items) = history_counts.shape();
    if config.top_k == 0 || config.top_k > n_items {
        return Err(Error::Config(format!("top_k must lie in 1..={n_items}")));
    }
    if probs.shape() != (n, n_items) {
        return Err(Error::Config(
            "history and probability matrices differ in shape".into(),
        ));
    }
    let popularity: Vec<u64> = (0..n_items)
        .map(|j| history_counts.column(j).iter().map(|&c| u64::from(c)).sum())
        .collect();
    let desc = |a: f64, b: f64| b.total_cmp(&a);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n_items).collect();
        let counts = history_counts.row(i);
        match config.strategy {
            Strategy::Prop => {
                order.sort_by(|&a, &b| desc(probs[(i, a)], probs[(i, b)]).then(a.cmp(&b)))
            }
            Strategy::Hist => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.tie_seed);
                rng.set_stream(i as u64);
                let keys: Vec<u64> = (0..n_items).map(|_| rng.gen()).collect();
                order.sort_by(|&a, &b| {
                    counts[b]
                        .cmp(&counts[a])
                        .then(keys[a].cmp(&keys[b]))
                        .then(a.cmp(&b))
                });
            }
            Strategy::HistHist => order.sort_by(|&a, &b| {
                counts[b]
                    .cmp(&counts[a])
                    .then(popularity[b].cmp(&popularity[a]))
                    .then(a.cmp(&b))
            }),
            Strategy::HistProp => order.sort_by(|&a, &b| {
                counts[b]
                    .cmp(&counts[a])
                    .then_with(|| desc(probs[(i, a)], probs[(i, b)]))
                    .then(a.cmp(&b))
            }),
        }
        order.truncate(config.top_k);
        out.push(order);
    }
    Ok(out)
}

/// Share of actual purchases that appear among the recommendations.
pub fn sensitivity(recommendations: &[Vec<usize>], actual: &DMatrix<bool>) -> Result<f64> {
    if recommendations.len() != actual.nrows() {
        return Err(Error::Config(
            "one recommendation list per person is required".into(),
        ));
    }
    let total = actual.iter().filter(|&&a| a).count();
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "sensitivity needs at least one actual purchase".into(),
        ));
    }
    let mut hits = 0usize;
    for (i, recs) in recommendations.iter().enumerate() {
        let mut seen = vec![false; actual.ncols()];
        for &j in recs {
            if j >= actual.ncols() {
                return Err(Error::Config(format!("recommended item {j} out of range")));
            }
            if !seen[j] && actual[(i, j)] {
                hits += 1;
            }
            seen[j] = true;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{sigmoid, Family};
    use crate::model::Variant;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn data(t: usize) -> Dataset {
        Dataset::new(
            2,
            2,
            t,
            vec![1.0; 4 * t],
            vec![true; 2 * t],
            DMatrix::zeros(2, 0),
            None,
            vec![Family::Bernoulli; 2],
        )
        .unwrap()
    }

    fn cfg(strategy: Strategy, top_k: usize) -> RecommendationConfig {
        RecommendationConfig {
            strategy,
            top_k,
            tie_seed: 3,
        }
    }

    #[test]
    fn next_period_probabilities() {
        let ds = data(4);
        let spec = ModelSpec::new(0);
        let layout = spec.layout(&ds).unwrap();
        let mut params = ParameterSet::zeros(2, 2, &layout);
        assert!(predict_proba_next(&spec, &ds, &params)
            .unwrap()
            .iter()
            .all(|&p| p == 0.5));
        params.item_params[(0, 3)] = 2.0;
        params.item_params[(0, 0)] = -7.0;
        let p = predict_proba_next(&spec, &ds, &params).unwrap();
        assert_relative_eq!(p[(1, 0)], 0.8807970779778823, epsilon = 1e-15);

        let spec = ModelSpec::from_variant(Variant::LinearIntercept, 0);
        let layout = spec.layout(&ds).unwrap();
        let mut params = ParameterSet::zeros(2, 2, &layout);
        params.item_params[(1, 0)] = 0.1;
        let p = predict_proba_next(&spec, &ds, &params).unwrap();
        assert_relative_eq!(p[(0, 1)], sigmoid(0.5), epsilon = 1e-15);
    }

    #[test]
    fn deviance_examples() {
        let ds = Dataset::new(
            1,
            1,
            1,
            vec![1.0],
            vec![true],
            DMatrix::zeros(1, 0),
            None,
            vec![Family::Bernoulli],
        )
        .unwrap();
        let (per, total) = residual_deviance(&ds, &DMatrix::from_element(1, 1, 0.5), 0).unwrap();
        assert_relative_eq!(total, 4f64.ln(), epsilon = 1e-15);
        assert_eq!(per, vec![total]);
        let (_, total) = residual_deviance(&ds, &DMatrix::from_element(1, 1, 1.0), 0).unwrap();
        assert!(total < 1e-10);
        let ds2 = Dataset::new(
            1,
            1,
            2,
            vec![1.0, 0.0],
            vec![true, false],
            DMatrix::zeros(1, 0),
            None,
            vec![Family::Bernoulli],
        )
        .unwrap();
        assert_eq!(
            residual_deviance(&ds2, &DMatrix::from_element(1, 1, 0.3), 1)
                .unwrap()
                .1,
            0.0
        );
    }

    #[test]
    fn recommend_examples() {
        let counts = DMatrix::from_row_slice(1, 3, &[0u32, 0, 0]);
        let probs = DMatrix::from_row_slice(1, 3, &[0.9, 0.1, 0.5]);
        assert_eq!(
            recommend(&cfg(Strategy::Prop, 2), &counts, &probs).unwrap(),
            vec![vec![0, 2]]
        );

        let counts = DMatrix::from_row_slice(1, 3, &[2u32, 2, 0]);
        let probs = DMatrix::from_row_slice(1, 3, &[0.1, 0.9, 0.5]);
        assert_eq!(
            recommend(&cfg(Strategy::HistProp, 2), &counts, &probs).unwrap(),
            vec![vec![1, 0]]
        );

        // second person carries the overall popularity (5, 9)
        let counts = DMatrix::from_row_slice(2, 2, &[0u32, 0, 5, 9]);
        let probs = DMatrix::from_element(2, 2, 0.5);
        assert_eq!(
            recommend(&cfg(Strategy::HistHist, 1), &counts, &probs).unwrap()[0],
            vec![1]
        );
    }

    #[test]
    fn hist_ties_are_seeded() {
        let counts = DMatrix::from_element(3, 12, 1u32);
        let probs = DMatrix::from_element(3, 12, 0.5);
        let a = recommend(&cfg(Strategy::Hist, 4), &counts, &probs).unwrap();
        assert_eq!(
            a,
            recommend(&cfg(Strategy::Hist, 4), &counts, &probs).unwrap()
        );
        let other = RecommendationConfig {
            tie_seed: 4,
            ..cfg(Strategy::Hist, 4)
        };
        assert_ne!(a, recommend(&other, &counts, &probs).unwrap());
        // the highest count always comes first
        let mut c2 = counts.clone();
        c2[(0, 7)] = 5;
        assert_eq!(
            recommend(&cfg(Strategy::Hist, 1), &c2, &probs).unwrap()[0],
            vec![7]
        );
    }

    #[test]
    fn sensitivity_examples() {
        let actual =
            DMatrix::from_row_slice(2, 4, &[true, false, false, false, true, true, false, false]);
        assert_relative_eq!(
            sensitivity(&[vec![0], vec![2, 3]], &actual).unwrap(),
            1.0 / 3.0
        );
        assert_eq!(
            sensitivity(&[vec![0, 1], vec![0, 1]], &actual).unwrap(),
            1.0
        );
        assert_eq!(sensitivity(&[vec![2], vec![3]], &actual).unwrap(), 0.0);
        let none = DMatrix::from_element(2, 4, false);
        assert!(matches!(
            sensitivity(&[vec![0], vec![0]], &none),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn prop_invariant_to_monotone_transform(ps in proptest::collection::vec(0.001f64..0.999, 6)) {
            let probs = DMatrix::from_row_slice(1, 6, &ps);
            let logits = probs.map(|p| (p / (1.0 - p)).ln() * 3.0 + 1.0);
            let counts = DMatrix::from_element(1, 6, 0u32);
            let c = cfg(Strategy::Prop, 3);
            prop_assert_eq!(recommend(&c, &counts, &probs).unwrap(), recommend(&c, &counts, &logits).unwrap());
        }
    }
}
