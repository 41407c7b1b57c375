//! Test-only helpers: adaptive Gauss–Kronrod quadrature and density-based
//! survival-function oracles, plus small dataset builders.

#![allow(dead_code)]

use std::collections::BTreeMap;

use habench::{Mask, SampleRow, SampleTable, VolumeGeometry, VoxelDataset};
use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

const XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WK[7] * fc;
    let mut gauss = WG[3] * fc;
    for k in 0..7 {
        let x = h * XK[k];
        let pair = f(c - x) + f(c + x);
        kronrod += WK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Globally adaptive: repeatedly bisects the panel with the largest error
/// estimate until the summed error is below `rel · |I|`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    let f: &dyn Fn(f64) -> f64 = &f;
    let (v, e) = gk15(f, a, b);
    let mut panels = vec![(a, b, v, e)];
    for _ in 0..5000 {
        let total: f64 = panels.iter().map(|p| p.2).sum();
        let err: f64 = panels.iter().map(|p| p.3).sum();
        if err <= rel * total.abs() || err < 1e-300 {
            break;
        }
        let (k, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let (lo, hi, _, _) = panels.swap_remove(k);
        let mid = 0.5 * (lo + hi);
        let (lv, le) = gk15(f, lo, mid);
        let (rv, re) = gk15(f, mid, hi);
        panels.push((lo, mid, lv, le));
        panels.push((mid, hi, rv, re));
    }
    panels.iter().map(|p| p.2).sum()
}

/// Upper tail of a density p on (x0, ∞) after x = 1/s², which keeps
/// polynomial tails and integrable singularities bounded.
fn tail(density: impl Fn(f64) -> f64, x0: f64) -> f64 {
    let g = |s: f64| if s <= 0.0 { 0.0 } else { density(1.0 / (s * s)) * 2.0 / (s * s * s) };
    integrate(g, 0.0, 1.0 / x0.sqrt(), 1e-14)
}

pub fn t_density(x: f64, df: f64) -> f64 {
    let ln_c = ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln();
    (ln_c - 0.5 * (df + 1.0) * (x * x / df).ln_1p()).exp()
}

pub fn f_density(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_b = ln_gamma(0.5 * d1) + ln_gamma(0.5 * d2) - ln_gamma(0.5 * (d1 + d2));
    let ln = 0.5 * d1 * (d1 / d2).ln() + (0.5 * d1 - 1.0) * x.ln()
        - 0.5 * (d1 + d2) * (d1 * x / d2).ln_1p()
        - ln_b;
    ln.exp()
}

/// P(T > t) by quadrature of the Student t density.
pub fn t_sf_oracle(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        0.5
    } else if t > 0.0 {
        tail(|x| t_density(x, df), t)
    } else {
        1.0 - tail(|x| t_density(x, df), -t)
    }
}

/// P(F > f) by quadrature of the F density.
pub fn f_sf_oracle(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        1.0
    } else {
        tail(|x| f_density(x, d1, d2), f)
    }
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs()
    }
}

/// One-dimensional dataset (dims [V,1,1], full mask) with the given site labels.
pub fn dataset(values: Array2<f64>, sites: &[String]) -> VoxelDataset {
    let rows = sites
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRow {
            image_id: format!("img{i}"),
            path: format!("img{i}").into(),
            site: s.clone(),
            covariates: BTreeMap::new(),
        })
        .collect();
    let g = VolumeGeometry::with_spacing([values.ncols(), 1, 1], [1.0; 3]).unwrap();
    VoxelDataset::new(values, Mask::full(g).unwrap(), SampleTable::new(rows, vec![]).unwrap()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_closed_forms() {
        assert!(rel_err(integrate(|x| x.exp(), 0.0, 1.0, 1e-14), std::f64::consts::E - 1.0) < 1e-14);
        // Cauchy: P(T > 1) = 1/4.
        assert!(rel_err(t_sf_oracle(1.0, 1.0), 0.25) < 1e-13);
        // F(2, 2): P(F > f) = 1/(1+f).
        assert!(rel_err(f_sf_oracle(3.0, 2.0, 2.0), 0.25) < 1e-13);
    }
}
