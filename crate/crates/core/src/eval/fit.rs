use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares of relative gain on `log10(num_examples)`.
pub fn relative_gain_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::SingularFit(format!("{} point(s)", points.len())));
    }
    if let Some(&(n, _)) = points.iter().find(|(n, _)| !(*n > 0.0)) {
        return Err(Error::SingularFit(format!(
            "example count {n} is not positive"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| n.log10()).collect();
    let m = points.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, (_, y)) in xs.iter().zip(points) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::SingularFit("all example counts are equal".into()));
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_is_recovered() {
        let pts: Vec<(f64, f64)> = [2.0, 16.0, 64.0, 512.0]
            .iter()
            .map(|&n: &f64| (n, 0.25 - 0.04 * n.log10()))
            .collect();
        let f = relative_gain_fit(&pts).unwrap();
        assert!((f.slope + 0.04).abs() < 1e-12);
        assert!((f.intercept - 0.25).abs() < 1e-12);
    }

    #[test]
    fn constant_gain_has_zero_slope() {
        let f = relative_gain_fit(&[(4.0, 0.1), (40.0, 0.1), (400.0, 0.1)]).unwrap();
        assert!(f.slope.abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_singular() {
        assert!(matches!(
            relative_gain_fit(&[(8.0, 0.1), (8.0, 0.3)]),
            Err(Error::SingularFit(_))
        ));
        assert!(matches!(
            relative_gain_fit(&[(8.0, 0.1)]),
            Err(Error::SingularFit(_))
        ));
    }
}
