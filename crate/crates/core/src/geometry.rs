//! Planar array-of-subarrays layout.
//!
//! Subarrays sit on a `sqrt(N) x sqrt(N)` grid and each holds a
//! `sqrt(Nbar) x sqrt(Nbar)` grid of elements. The origin is the first
//! element of the first subarray and the whole array lies in the x-y plane.

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArraySpec {
    pub num_subarrays: usize,
    pub elements_per_subarray: usize,
    pub element_spacing: f64,
    pub subarray_spacing: f64,
    pub carrier_frequency: f64,
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl ArraySpec {
    /// Desk-scale default: 4 subarrays of 16 elements at 100 GHz with
    /// half-wavelength element spacing and a two-wavelength subarray gap.
    pub fn desk() -> Self {
        let wavelength = SPEED_OF_LIGHT / 100e9;
        ArraySpec {
            num_subarrays: 4,
            elements_per_subarray: 16,
            element_spacing: wavelength / 2.0,
            subarray_spacing: 2.0 * wavelength,
            carrier_frequency: 100e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subarrays == 0 || exact_sqrt(self.num_subarrays).is_none() {
            return Err(Error::config(
                "array.N",
                format!("{} is not a positive perfect square", self.num_subarrays),
            ));
        }
        if self.elements_per_subarray == 0 || exact_sqrt(self.elements_per_subarray).is_none() {
            return Err(Error::config(
                "array.Nbar",
                format!("{} is not a positive perfect square", self.elements_per_subarray),
            ));
        }
        if !(self.element_spacing > 0.0) {
            return Err(Error::config("array.d_a", "element spacing must be positive"));
        }
        if !(self.subarray_spacing >= self.element_spacing) {
            return Err(Error::config(
                "array.d_sub",
                "subarray spacing must be at least the element spacing",
            ));
        }
        if !(self.carrier_frequency > 0.0) {
            return Err(Error::config("array.f_c", "carrier frequency must be positive"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Total number of elements `M = N * Nbar`.
    pub fn num_elements(&self) -> usize {
        self.num_subarrays * self.elements_per_subarray
    }

    pub fn subarray_side(&self) -> usize {
        exact_sqrt(self.num_subarrays).expect("validated spec")
    }

    pub fn element_side(&self) -> usize {
        exact_sqrt(self.elements_per_subarray).expect("validated spec")
    }

    /// Centre-to-centre distance between neighbouring subarray origins.
    pub fn subarray_pitch(&self) -> f64 {
        (self.element_side() as f64 - 1.0) * self.element_spacing + self.subarray_spacing
    }

    /// Position of element `element` (1-based) inside subarray `subarray` (1-based).
    pub fn element_position(&self, subarray: usize, element: usize) -> Result<[f64; 3]> {
        if subarray < 1 || subarray > self.num_subarrays {
            return Err(Error::input(format!(
                "subarray index {subarray} outside 1..={}",
                self.num_subarrays
            )));
        }
        if element < 1 || element > self.elements_per_subarray {
            return Err(Error::input(format!(
                "element index {element} outside 1..={}",
                self.elements_per_subarray
            )));
        }
        Ok(self.position_unchecked(subarray - 1, element - 1))
    }

    /// Zero-based variant used internally on hot paths.
    pub(crate) fn position_unchecked(&self, subarray: usize, element: usize) -> [f64; 3] {
        let sa_side = self.subarray_side();
        let el_side = self.element_side();
        let (x, y) = (subarray / sa_side, subarray % sa_side);
        let (xb, yb) = (element / el_side, element % el_side);
        let pitch = self.subarray_pitch();
        [
            x as f64 * pitch + xb as f64 * self.element_spacing,
            y as f64 * pitch + yb as f64 * self.element_spacing,
            0.0,
        ]
    }

    /// All `M` element positions in vectorisation order `m = n * Nbar + nbar`.
    pub fn positions(&self) -> Vec<[f64; 3]> {
        (0..self.num_subarrays)
            .flat_map(|n| (0..self.elements_per_subarray).map(move |e| (n, e)))
            .map(|(n, e)| self.position_unchecked(n, e))
            .collect()
    }

    /// Corner-to-corner diagonal of the array.
    pub fn aperture(&self) -> f64 {
        let first = self.position_unchecked(0, 0);
        let last = self.position_unchecked(self.num_subarrays - 1, self.elements_per_subarray - 1);
        distance(&first, &last)
    }

    /// Near/far-field boundary `2 D^2 / lambda`.
    pub fn rayleigh_distance(&self) -> f64 {
        let d = self.aperture();
        2.0 * d * d / self.wavelength()
    }
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
