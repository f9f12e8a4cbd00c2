//! Per-class feature centroids with EMA refresh and dot-product prediction.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{energy_score, softmax};
use crate::nn::Real;

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("feature length {got} does not match prototype length {expected}")]
    Dim { expected: usize, got: usize },
    #[error("{features} feature rows but {logits} logit rows")]
    Rows { features: usize, logits: usize },
    #[error("logits have {got} classes, prototypes have {expected}")]
    Classes { expected: usize, got: usize },
    #[error("smoothing factor {0} is outside [0, 1]")]
    Alpha(f64),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which side of the energy threshold a sample must fall on to contribute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDirection {
    /// Keep `E(x) > threshold`.
    #[default]
    Above,
    /// Keep `E(x) < threshold`.
    Below,
}

impl FilterDirection {
    pub fn keeps(self, energy: f64, threshold: f64) -> bool {
        match self {
            FilterDirection::Above => energy > threshold,
            FilterDirection::Below => energy < threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    protos: Array2<T>,
    pub alpha: T,
    pub threshold: T,
    pub direction: FilterDirection,
    pub tau: T,
}

/// Per-update bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    /// Samples admitted to each class's pseudo-prototype.
    pub members: Vec<usize>,
}

impl<T: Real> PrototypeSet<T> {
    /// Prototypes are the rows of the classifier weight matrix; bias is ignored.
    pub fn from_classifier(
        weight: ArrayView2<T>,
        alpha: f64,
        threshold: f64,
        direction: FilterDirection,
    ) -> Result<Self, PrototypeError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(PrototypeError::Alpha(alpha));
        }
        Ok(Self {
            protos: weight.to_owned(),
            alpha: T::of(alpha),
            threshold: T::of(threshold),
            direction,
            tau: T::one(),
        })
    }

    pub fn classes(&self) -> usize {
        self.protos.nrows()
    }

    pub fn dim(&self) -> usize {
        self.protos.ncols()
    }

    pub fn prototypes(&self) -> ArrayView2<'_, T> {
        self.protos.view()
    }

    /// Pseudo-labels from `logits`, energy filter, then `P ← αP + (1−α)P̂`
    /// for every class with at least one admitted sample.
    pub fn update(
        &mut self,
        features: ArrayView2<T>,
        logits: ArrayView2<T>,
    ) -> Result<UpdateStats, PrototypeError> {
        if features.nrows() != logits.nrows() {
            return Err(PrototypeError::Rows {
                features: features.nrows(),
                logits: logits.nrows(),
            });
        }
        if features.ncols() != self.dim() {
            return Err(PrototypeError::Dim {
                expected: self.dim(),
                got: features.ncols(),
            });
        }
        if logits.ncols() != self.classes() {
            return Err(PrototypeError::Classes {
                expected: self.classes(),
                got: logits.ncols(),
            });
        }
        let c = self.classes();
        let mut sums = Array2::<T>::zeros((c, self.dim()));
        let mut counts = vec![0usize; c];
        for (z, f) in features.outer_iter().zip(logits.outer_iter()) {
            let row = f.to_vec();
            let e = energy_score(&row, self.tau);
            if !self.direction.keeps(e.as_f64(), self.threshold.as_f64()) {
                continue;
            }
            let k = argmax(&row);
            counts[k] += 1;
            sums.row_mut(k).zip_mut_with(&z, |s, &v| *s += v);
        }
        let beta = T::one() - self.alpha;
        for k in 0..c {
            if counts[k] == 0 {
                continue;
            }
            let n = T::of(counts[k] as f64);
            let alpha = self.alpha;
            let mean = sums.row(k).mapv(|s| s / n);
            self.protos
                .row_mut(k)
                .zip_mut_with(&mean, |p, &m| *p = alpha * *p + beta * m);
        }
        Ok(UpdateStats { members: counts })
    }

    /// Similarity logits `s_k = z · P_k`.
    pub fn similarities(&self, z: ArrayView1<T>) -> Result<Array1<T>, PrototypeError> {
        if z.len() != self.dim() {
            return Err(PrototypeError::Dim {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self.protos.dot(&z))
    }

    /// Returns the predicted class and softmax probabilities over similarities.
    pub fn predict(&self, z: ArrayView1<T>) -> Result<(usize, Vec<T>), PrototypeError> {
        let s = self.similarities(z)?.to_vec();
        let p = softmax(&s);
        Ok((argmax(&s), p))
    }

    /// CSV rows `class,feature,value`.
    pub fn write_csv(&self, path: &Path) -> Result<(), PrototypeError> {
        let io = |source| PrototypeError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = String::from("class,feature,value\n");
        for (k, row) in self.protos.outer_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{k},{j},{}\n", v.as_f64()));
            }
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(out.as_bytes()).map_err(io)
    }
}

/// First index of the maximum; NaN never wins.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn set(p: Array2<f64>, direction: FilterDirection) -> PrototypeSet<f64> {
        PrototypeSet::from_classifier(p.view(), 0.9, -7.0, direction).unwrap()
    }

    #[test]
    fn init_copies_classifier_rows() {
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let s = set(w.clone(), FilterDirection::Above);
        assert_eq!(s.prototypes(), w.view());
        let wide = Array2::<f64>::zeros((2, 192));
        let s = set(wide, FilterDirection::Above);
        assert_eq!((s.classes(), s.dim()), (2, 192));
    }

    #[test]
    fn scalar_ema() {
        let mut s = set(array![[1.0], [5.0]], FilterDirection::Above);
        // Logits (0, -1) give energy about -0.31, above -7.
        s.update(array![[0.0]].view(), array![[0.0, -1.0]].view()).unwrap();
        assert!((s.prototypes()[[0, 0]] - 0.9).abs() < 1e-12);
        assert_eq!(s.prototypes()[[1, 0]], 5.0);
    }

    #[test]
    fn mean_then_ema_example() {
        let mut s = set(Array2::zeros((2, 2)), FilterDirection::Above);
        let z = array![[1.0, 1.0], [3.0, 1.0], [2.0, 4.0]];
        let f = array![[1.0, 0.0], [2.0, 0.0], [0.5, 0.0]];
        let stats = s.update(z.view(), f.view()).unwrap();
        assert_eq!(stats.members, vec![3, 0]);
        assert!((s.prototypes()[[0, 0]] - 0.2).abs() < 1e-12);
        assert!((s.prototypes()[[0, 1]] - 0.2).abs() < 1e-12);
        assert_eq!(s.prototypes().row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn filter_direction_selects_side_of_threshold() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        // Energies: about -0.69 and about -20.
        let f = array![[0.0, 0.0], [20.0, 0.0]];
        let mut above = set(Array2::zeros((2, 2)), FilterDirection::Above);
        above.update(z.view(), f.view()).unwrap();
        assert!((above.prototypes()[[0, 0]] - 0.1).abs() < 1e-12);
        assert_eq!(above.prototypes()[[0, 1]], 0.0);
        let mut below = set(Array2::zeros((2, 2)), FilterDirection::Below);
        below.update(z.view(), f.view()).unwrap();
        assert_eq!(below.prototypes()[[0, 0]], 0.0);
        assert!((below.prototypes()[[0, 1]] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn predict_examples() {
        let s = set(array![[1.0, 0.0], [0.0, 0.0]], FilterDirection::Above);
        let (k, p) = s.predict(array![2.0, 7.0].view()).unwrap();
        assert_eq!(k, 0);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);

        let s = set(array![[1.0, 0.0], [0.0, 1.0]], FilterDirection::Above);
        let (_, p) = s.predict(array![0.0, 0.0].view()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(s.predict(array![1.0].view()).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut s = set(Array2::zeros((2, 2)), FilterDirection::Above);
        assert!(matches!(
            s.update(Array2::zeros((3, 2)).view(), Array2::zeros((2, 2)).view()),
            Err(PrototypeError::Rows { .. })
        ));
        assert!(matches!(
            s.update(Array2::zeros((1, 3)).view(), Array2::zeros((1, 2)).view()),
            Err(PrototypeError::Dim { .. })
        ));
        assert!(PrototypeSet::<f64>::from_classifier(Array2::zeros((2, 2)).view(), 1.5, 0.0, FilterDirection::Above).is_err());
    }

    #[test]
    fn csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        set(array![[1.5, 0.0], [0.0, -2.0]], FilterDirection::Above).write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "class,feature,value\n0,0,1.5\n0,1,0\n1,0,0\n1,1,-2\n");
    }

    proptest! {
        #[test]
        fn ema_contracts_geometrically(p0 in -10.0f64..10.0, target in -10.0f64..10.0, steps in 1usize..30) {
            let mut s = set(array![[p0], [0.0]], FilterDirection::Above);
            for _ in 0..steps {
                s.update(array![[target]].view(), array![[0.0, -1.0]].view()).unwrap();
            }
            let expected = target + (p0 - target) * 0.9f64.powi(steps as i32);
            prop_assert!((s.prototypes()[[0, 0]] - expected).abs() < 1e-9);
        }

        #[test]
        fn probabilities_sum_to_one_and_scale_keeps_argmax(
            w in proptest::collection::vec(-3.0f64..3.0, 6),
            z in proptest::collection::vec(-3.0f64..3.0, 3),
            lambda in 0.01f64..50.0,
        ) {
            let s = set(Array2::from_shape_vec((2, 3), w).unwrap(), FilterDirection::Above);
            let z = Array1::from(z);
            let (k, p) = s.predict(z.view()).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let sims = s.similarities(z.view()).unwrap();
            if (sims[0] - sims[1]).abs() > 1e-9 {
                let (k2, _) = s.predict(z.mapv(|v| v * lambda).view()).unwrap();
                prop_assert_eq!(k, k2);
            }
        }
    }
}
