//! Linear probe: a closed-form ridge classifier on frozen embeddings.

use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct RidgeProbe {
    /// (d + 1) x classes, last row is the bias.
    weights: DMatrix<f64>,
    n_classes: usize,
}

fn design(features: &[Vec<f32>]) -> DMatrix<f64> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { features[i][j] as f64 })
}

impl RidgeProbe {
    /// Fits one-vs-rest ridge regression on one-hot targets.
    ///
    /// Uses the dual form when there are fewer samples than features.
    pub fn fit(features: &[Vec<f32>], labels: &[usize], n_classes: usize, lambda: f64) -> Option<Self> {
        if features.is_empty() || features.len() != labels.len() || labels.iter().any(|&l| l >= n_classes) {
            return None;
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return None;
        }
        let x = design(features);
        let y = DMatrix::from_fn(labels.len(), n_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        let (n, p) = x.shape();
        let weights = if n < p {
            let gram = &x * x.transpose() + DMatrix::identity(n, n) * lambda;
            let alpha = gram.cholesky()?.solve(&y);
            x.transpose() * alpha
        } else {
            let gram = x.transpose() * &x + DMatrix::identity(p, p) * lambda;
            gram.cholesky()?.solve(&(x.transpose() * y))
        };
        Some(Self { weights, n_classes })
    }

    pub fn predict(&self, features: &[Vec<f32>]) -> Vec<usize> {
        if features.is_empty() {
            return Vec::new();
        }
        let scores = design(features) * &self.weights;
        (0..scores.nrows())
            .map(|i| {
                (0..self.n_classes)
                    .max_by(|&a, &b| scores[(i, a)].total_cmp(&scores[(i, b)]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect()
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let pred = self.predict(features);
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
    }
}
