//! Accuracy, correlation and leave-one-out human performance.

use crate::data::{binarize, DatasetManifest};
use crate::error::{Error, Result};
use crate::seeding::derive;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub image_ids: Vec<String>,
    /// Positive-class probability per image.
    pub p_positive: Vec<f64>,
    pub binary_truth: Vec<usize>,
    /// Mean human rating per image.
    pub continuous_truth: Vec<f64>,
}

impl PredictionSet {
    pub fn new(image_ids: Vec<String>, p_positive: Vec<f64>, binary_truth: Vec<usize>, continuous_truth: Vec<f64>) -> Result<PredictionSet> {
        let n = image_ids.len();
        if p_positive.len() != n || binary_truth.len() != n || continuous_truth.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "prediction set lengths {n}, {}, {}, {}",
                p_positive.len(),
                binary_truth.len(),
                continuous_truth.len()
            )));
        }
        if let Some(p) = p_positive.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!("probability {p} outside [0,1]")));
        }
        Ok(PredictionSet { image_ids, p_positive, binary_truth, continuous_truth })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }
}

/// Fraction of images where `p ≥ 0.5` agrees with the binary truth.
pub fn accuracy(ps: &PredictionSet) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = ps.p_positive.iter().zip(&ps.binary_truth).filter(|(&p, &t)| usize::from(p >= 0.5) == t).count();
    Ok(hits as f64 / ps.len() as f64)
}

/// Pearson correlation of the positive-class probability with the mean rating.
pub fn correlation(ps: &PredictionSet) -> Result<f64> {
    pearson(&ps.p_positive, &ps.continuous_truth)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("{} values", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LooKind {
    Accuracy,
    Correlation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanLoo {
    pub per_rater: Vec<f64>,
    pub mean: f64,
}

/// Class labels used to score one rater: thresholding at 0.5 for attributes
/// scored only 0/1, otherwise the median split.
fn labels_for(values: &[f64], binary: bool, seed: u64) -> Result<Vec<Option<usize>>> {
    if binary {
        Ok(values.iter().map(|&v| Some(usize::from(v >= 0.5))).collect())
    } else {
        Ok(binarize(values, seed)?.labels)
    }
}

/// Scores every rater against the mean of the remaining raters. Accuracy
/// compares the two binarizations over images labelled by both; correlation
/// is Pearson on the raw scores.
pub fn human_loo(dataset: &DatasetManifest, attribute: &str, kind: LooKind, seed: u64) -> Result<HumanLoo> {
    let m = dataset.rater_matrix(attribute)?;
    human_loo_matrix(&m, dataset.is_binary_attribute(attribute), kind, seed)
}

/// [`human_loo`] on a `[rater][image]` score matrix.
pub fn human_loo_matrix(m: &[Vec<f64>], binary: bool, kind: LooKind, seed: u64) -> Result<HumanLoo> {
    if m.len() < 2 {
        return Err(Error::InsufficientRaters(m.len()));
    }
    let n = m[0].len();
    if m.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch("raters scored different numbers of images".into()));
    }
    let per_rater = (0..m.len())
        .map(|r| {
            let others: Vec<f64> = (0..n)
                .map(|i| (0..m.len()).filter(|&o| o != r).map(|o| m[o][i]).sum::<f64>() / (m.len() - 1) as f64)
                .collect();
            match kind {
                LooKind::Correlation => pearson(&m[r], &others),
                LooKind::Accuracy => {
                    let a = labels_for(&m[r], binary, derive(seed, &[r as u64, 0]))?;
                    let b = labels_for(&others, binary, derive(seed, &[r as u64, 1]))?;
                    let pairs: Vec<bool> = a.iter().zip(&b).filter_map(|(x, y)| Some(x.as_ref()? == y.as_ref()?)).collect();
                    if pairs.is_empty() {
                        return Err(Error::EmptySet);
                    }
                    Ok(pairs.iter().filter(|&&h| h).count() as f64 / pairs.len() as f64)
                }
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_rater.iter().sum::<f64>() / per_rater.len() as f64;
    Ok(HumanLoo { per_rater, mean })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::data::FaceExample;
    use crate::tensor::Tensor;

    fn ps(p: &[f64], truth: &[usize], cont: &[f64]) -> PredictionSet {
        let ids = (0..p.len()).map(|i| format!("i{i}")).collect();
        PredictionSet::new(ids, p.to_vec(), truth.to_vec(), cont.to_vec()).unwrap()
    }

    fn manifest(raters: &[Vec<f64>]) -> DatasetManifest {
        let n = raters[0].len();
        let examples = (0..n)
            .map(|i| FaceExample {
                image_id: format!("i{i}"),
                image_path: format!("i{i}.png").into(),
                image: Tensor::zeros(&[3, 1, 1]).unwrap(),
                ratings: BTreeMap::from([("a".to_string(), raters.iter().map(|r| r[i]).collect())]),
            })
            .collect();
        DatasetManifest {
            examples,
            attributes: vec!["a".into()],
            raters_per_attribute: BTreeMap::from([("a".to_string(), raters.len())]),
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&ps(&[0.9, 0.2, 0.6, 0.4], &[1, 0, 1, 0], &[0.0; 4])).unwrap(), 1.0);
        assert_eq!(accuracy(&ps(&[0.9, 0.9], &[1, 0], &[0.0; 2])).unwrap(), 0.5);
        assert_eq!(accuracy(&ps(&[0.5], &[1], &[0.0])).unwrap(), 1.0);
        assert!(matches!(accuracy(&ps(&[], &[], &[])), Err(Error::EmptySet)));
    }

    #[test]
    fn accuracy_ignores_monotone_transforms_fixing_half() {
        let p = [0.1, 0.49, 0.5, 0.7, 0.95, 0.3];
        let truth = [0, 1, 1, 1, 0, 0];
        let warped: Vec<f64> = p.iter().map(|&v: &f64| 0.5 + (v - 0.5).signum() * (v - 0.5).abs().powf(2.0) * 2.0).collect();
        assert_eq!(accuracy(&ps(&p, &truth, &[0.0; 6])).unwrap(), accuracy(&ps(&warped, &truth, &[0.0; 6])).unwrap());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pearson(&[0.1, 0.5, 0.3], &[0.1, 0.5, 0.3]).unwrap(), 1.0);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let x = [0.3, 0.9, 0.1, 0.5, 0.75];
        let y = [2.0, 5.0, 1.5, 2.5, 4.0];
        let r = pearson(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        let y2: Vec<f64> = y.iter().map(|v| 0.25 * v - 2.0).collect();
        assert!((pearson(&x2, &y2).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn identical_raters_agree_perfectly() {
        let r = vec![0.1, 0.8, 0.4, 0.6, 0.3, 0.9];
        let m = manifest(&[r.clone(), r.clone(), r]);
        let loo = human_loo(&m, "a", LooKind::Correlation, 0).unwrap();
        assert!(loo.per_rater.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        let acc = human_loo(&m, "a", LooKind::Accuracy, 0).unwrap();
        assert_eq!(acc.per_rater, vec![1.0; 3]);
    }

    #[test]
    fn anticorrelated_pair() {
        let m = manifest(&[vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]]);
        let loo = human_loo(&m, "a", LooKind::Correlation, 0).unwrap();
        assert!(loo.per_rater.iter().all(|&c| (c + 1.0).abs() < 1e-12));
        assert!((loo.mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_scores_are_thresholded() {
        let m = manifest(&[vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let acc = human_loo(&m, "a", LooKind::Accuracy, 0).unwrap();
        assert_eq!(acc.per_rater, vec![1.0, 1.0, 0.75]);
    }

    #[test]
    fn single_rater_is_rejected() {
        let m = manifest(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(human_loo(&m, "a", LooKind::Accuracy, 0), Err(Error::InsufficientRaters(1))));
    }
}
