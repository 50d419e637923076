//! Coarse-step PMD emulation: concatenated birefringent sections, each a
//! random Jones rotation followed by a differential group delay.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::link::DispersionMap;

pub type Jones = [[Complex64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmdSection {
    /// Differential group delay, s.
    pub dgd: f64,
    /// (theta, phi, psi) of U = [[cos t e^{j phi}, -sin t e^{-j psi}], [sin t e^{j psi}, cos t e^{-j phi}]].
    pub rotation: [f64; 3],
}

impl PmdSection {
    pub fn identity() -> Self {
        Self { dgd: 0.0, rotation: [0.0; 3] }
    }

    /// Haar-uniform rotation with the given DGD.
    pub fn random_rotation<R: Rng + ?Sized>(dgd: f64, rng: &mut R) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let a = Complex64::new(q[0], q[1]);
        let b = Complex64::new(q[2], q[3]);
        Self { dgd, rotation: [b.norm().atan2(a.norm()), a.arg(), b.arg()] }
    }

    pub fn jones(&self) -> Jones {
        let [t, phi, psi] = self.rotation;
        let (s, c) = t.sin_cos();
        [
            [Complex64::from_polar(c, phi), -Complex64::from_polar(s, -psi)],
            [Complex64::from_polar(s, psi), Complex64::from_polar(c, -phi)],
        ]
    }

    /// Applies the section to both polarizations, given in the frequency domain.
    pub fn apply_spectrum(&self, xf: &mut [Complex64], yf: &mut [Complex64], omega: &[f64]) {
        let u = self.jones();
        for ((x, y), w) in xf.iter_mut().zip(yf.iter_mut()).zip(omega) {
            let nx = u[0][0] * *x + u[0][1] * *y;
            let ny = u[1][0] * *x + u[1][1] * *y;
            let d = Complex64::from_polar(1.0, -w * self.dgd / 2.0);
            *x = nx * d;
            *y = ny * d.conj();
        }
    }

    /// Exact inverse of [`apply_spectrum`](Self::apply_spectrum).
    pub fn invert_spectrum(&self, xf: &mut [Complex64], yf: &mut [Complex64], omega: &[f64]) {
        let u = self.jones();
        for ((x, y), w) in xf.iter_mut().zip(yf.iter_mut()).zip(omega) {
            let d = Complex64::from_polar(1.0, w * self.dgd / 2.0);
            let ax = *x * d;
            let ay = *y * d.conj();
            *x = u[0][0].conj() * ax + u[1][0].conj() * ay;
            *y = u[0][1].conj() * ax + u[1][1].conj() * ay;
        }
    }

    /// Jones matrix of the section at angular frequency `omega`.
    pub fn jones_at(&self, omega: f64) -> Jones {
        let u = self.jones();
        let d = Complex64::from_polar(1.0, -omega * self.dgd / 2.0);
        [[u[0][0] * d, u[0][1] * d], [u[1][0] * d.conj(), u[1][1] * d.conj()]]
    }
}

/// PMD sections of one fiber, evenly spread along its length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FiberPmd {
    pub sections: Vec<PmdSection>,
}

impl FiberPmd {
    /// Index of the split step after which section `i` acts, for `steps` steps.
    pub fn step_of_section(&self, i: usize, steps: usize) -> usize {
        let k = self.sections.len();
        ((i + 1) * steps / k).max(1) - 1
    }

    /// Sections scheduled after step `j`, in propagation order.
    pub fn sections_after_step(&self, j: usize, steps: usize) -> impl Iterator<Item = &PmdSection> {
        (0..self.sections.len())
            .filter(move |&i| self.step_of_section(i, steps) == j)
            .map(move |i| &self.sections[i])
    }

    /// Fractional position (0..1] along the fiber where section `i` acts.
    pub fn position(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.sections.len() as f64
    }
}

/// One sampled PMD state of the whole link: fiber `2s` is span `s`'s SMF,
/// fiber `2s+1` its DCF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdRealization {
    pub fibers: Vec<FiberPmd>,
}

impl PmdRealization {
    pub fn none(map: &DispersionMap) -> Self {
        Self { fibers: vec![FiberPmd::default(); 2 * map.spans.len()] }
    }

    /// Draws a realization. Each section's DGD is the length of a Gaussian
    /// 3-vector whose spread makes the concatenation's mean DGD equal
    /// `pmd_coef * sqrt(length)` for every fiber.
    pub fn draw<R: Rng + ?Sized>(
        map: &DispersionMap,
        sections_per_smf: usize,
        sections_per_dcf: usize,
        rng: &mut R,
    ) -> Self {
        let mut fibers = Vec::with_capacity(2 * map.spans.len());
        for span in &map.spans {
            for (fiber, count) in [(&span.smf, sections_per_smf), (&span.dcf, sections_per_dcf)] {
                let mean_dgd = fiber.pmd_ps_sqrt_km * 1e-12 * fiber.length_km.sqrt();
                if count == 0 || mean_dgd == 0.0 {
                    fibers.push(FiberPmd::default());
                    continue;
                }
                let sigma = mean_dgd * (PI / (8.0 * count as f64)).sqrt();
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                let sections = (0..count)
                    .map(|_| {
                        let v: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
                        let dgd = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        PmdSection::random_rotation(dgd, rng)
                    })
                    .collect();
                fibers.push(FiberPmd { sections });
            }
        }
        Self { fibers }
    }

    pub fn check_geometry(&self, map: &DispersionMap) -> Result<()> {
        if self.fibers.len() != 2 * map.spans.len() {
            return param(format!(
                "PMD realization covers {} fibers but the map has {}",
                self.fibers.len(),
                2 * map.spans.len()
            ));
        }
        Ok(())
    }

    pub fn is_trivial(&self) -> bool {
        self.fibers.iter().all(|f| f.sections.iter().all(|s| s.dgd == 0.0 && s.rotation == [0.0; 3]))
    }

    /// DGD of the concatenated link at `omega`, from the frequency derivative
    /// of the total Jones matrix: tau = 2 sqrt(|det dJ/domega|).
    pub fn total_dgd(&self) -> f64 {
        let h = 2.0 * PI * 1e8;
        let j = |w: f64| {
            let one = Complex64::new(1.0, 0.0);
            let zero = Complex64::new(0.0, 0.0);
            let mut m: Jones = [[one, zero], [zero, one]];
            for s in self.fibers.iter().flat_map(|f| &f.sections) {
                m = matmul(&s.jones_at(w), &m);
            }
            m
        };
        let (a, b) = (j(h), j(-h));
        let d = |r: usize, c: usize| (a[r][c] - b[r][c]) / (2.0 * h);
        let det = d(0, 0) * d(1, 1) - d(0, 1) * d(1, 0);
        2.0 * det.norm().sqrt()
    }
}

pub fn matmul(a: &Jones, b: &Jones) -> Jones {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][0] * b[0][c] + a[r][1] * b[1][c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{DispersionMap, SpanConfig};
    use crate::signal::angular_frequencies;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotations_are_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = PmdSection::random_rotation(1e-12, &mut rng);
            let u = s.jones();
            let uh: Jones = std::array::from_fn(|r| std::array::from_fn(|c| u[c][r].conj()));
            let p = matmul(&uh, &u);
            for r in 0..2 {
                for c in 0..2 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((p[r][c] - want).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn section_inverse_and_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 256;
        let omega = angular_frequencies(n, 512e9);
        let mut x: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let mut y: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let (x0, y0) = (x.clone(), y.clone());
        let e0: f64 = x.iter().chain(&y).map(|z| z.norm_sqr()).sum();
        let s = PmdSection::random_rotation(5e-12, &mut rng);
        s.apply_spectrum(&mut x, &mut y, &omega);
        let e1: f64 = x.iter().chain(&y).map(|z| z.norm_sqr()).sum();
        assert!((e1 - e0).abs() < 1e-12 * e0);
        s.invert_spectrum(&mut x, &mut y, &omega);
        for (a, b) in x.iter().zip(&x0).chain(y.iter().zip(&y0)) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn mean_link_dgd_matches_coefficient() {
        let mut span = SpanConfig::paper_default();
        span.smf.pmd_ps_sqrt_km = 0.5;
        let map = DispersionMap::closing(-1224.0, vec![span; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 3000;
        let mean: f64 = (0..trials)
            .map(|_| PmdRealization::draw(&map, 8, 0, &mut rng).total_dgd())
            .sum::<f64>()
            / trials as f64;
        let expected = 0.5e-12 * (4.0 * 72.0f64).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.05, "mean {mean:e} vs {expected:e}");
    }
}
