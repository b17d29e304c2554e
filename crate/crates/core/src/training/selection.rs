//! Choosing among trained runs and tuning the shallow-fusion weight.

use crate::{Error, Result};

/// Best run and, when requested, the top-`k` ensemble, both by dev BLEU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub single: usize,
    pub ensemble: Option<Vec<usize>>,
}

/// Run indices by dev BLEU, best first; ties keep the earlier run.
pub fn rank_runs(dev_bleu: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dev_bleu.len()).collect();
    idx.sort_by(|&a, &b| {
        dev_bleu[b]
            .partial_cmp(&dev_bleu[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub fn select_models(dev_bleu: &[f64], ensemble_size: Option<usize>) -> Result<Selection> {
    if dev_bleu.is_empty() {
        return Err(Error::Empty("run list"));
    }
    let ranked = rank_runs(dev_bleu);
    let ensemble = match ensemble_size {
        Some(k) if k > dev_bleu.len() || k == 0 => {
            return Err(Error::invalid(format!(
                "an ensemble of {k} needs at least {k} runs, got {}",
                dev_bleu.len()
            )))
        }
        Some(k) => Some(ranked[..k].to_vec()),
        None => None,
    };
    Ok(Selection {
        single: ranked[0],
        ensemble,
    })
}

/// `0, 0.05, .., 0.5`.
pub fn lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub bleu: f64,
    /// `(λ, dev BLEU)` for every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Evaluates every grid point; the best BLEU wins and ties go to the
/// smaller λ.
pub fn tune_lambda(grid: &[f64], mut dev_bleu: impl FnMut(f64) -> Result<f64>) -> Result<LambdaSearch> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &l in grid {
        if !(l >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {l}")));
        }
        curve.push((l, dev_bleu(l)?));
    }
    let (lambda, bleu) = curve
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |best, (l, b)| match best {
            Some((bl, bb)) if bb > b || (bb == b && bl <= l) => Some((bl, bb)),
            _ => Some((l, b)),
        })
        .expect("non-empty grid");
    Ok(LambdaSearch { lambda, bleu, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_examples() {
        let s = select_models(&[10.0, 12.0, 11.0, 9.0, 13.0], Some(4)).unwrap();
        assert_eq!(s.single, 4);
        assert_eq!(s.ensemble, Some(vec![4, 1, 2, 0]));
        assert_eq!(select_models(&[7.0], None).unwrap().single, 0);
        assert!(select_models(&[7.0, 8.0], Some(4)).is_err());
        let tie = select_models(&[5.0, 5.0, 5.0, 5.0, 5.0], Some(4)).unwrap();
        assert_eq!((tie.single, tie.ensemble), (0, Some(vec![0, 1, 2, 3])));
    }

    #[test]
    fn lambda_tuning() {
        let grid = lambda_grid();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid[3], 0.15);
        let flat = tune_lambda(&grid, |_| Ok(20.0)).unwrap();
        assert_eq!(flat.lambda, 0.0);
        let one = tune_lambda(&[0.3], |_| Ok(1.0)).unwrap();
        assert_eq!(one.lambda, 0.3);
        let peaked = tune_lambda(&grid, |l| Ok(20.0 - (l - 0.2).abs())).unwrap();
        assert_eq!(peaked.lambda, 0.2);
        assert!(peaked.bleu >= peaked.curve[0].1);
        assert!(tune_lambda(&[], |_| Ok(0.0)).is_err());
    }
}
