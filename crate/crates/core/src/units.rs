//! Physical constants and unit conversions.
//!
//! Internally amplitudes are sqrt(W), powers W, lengths m and times s.
//! Conversions to dB, dBm, km and ps/nm happen at the edges.

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Carrier wavelength used throughout (C-band center).
pub const DEFAULT_WAVELENGTH: f64 = 1550e-9;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    1e-3 * db_to_linear(dbm)
}

pub fn watt_to_dbm(w: f64) -> f64 {
    linear_to_db(w / 1e-3)
}

/// Power attenuation in dB/km to the field-power coefficient alpha in 1/m.
pub fn alpha_db_km_to_per_m(alpha_db_km: f64) -> f64 {
    alpha_db_km / (10.0 * std::f64::consts::E.log10()) / 1e3
}

/// Group-velocity dispersion beta2 (s^2/m) from D in ps/(nm km).
pub fn d_to_beta2(d_ps_nm_km: f64, wavelength: f64) -> f64 {
    // ps/(nm km) -> s/m^2
    let d_si = d_ps_nm_km * 1e-6;
    -d_si * wavelength * wavelength / (2.0 * std::f64::consts::PI * SPEED_OF_LIGHT)
}

/// Accumulated dispersion in ps/nm to the integrated beta2*L in s^2.
pub fn dispersion_to_beta2_length(d_acc_ps_nm: f64, wavelength: f64) -> f64 {
    let d_si = d_acc_ps_nm * 1e-3;
    -d_si * wavelength * wavelength / (2.0 * std::f64::consts::PI * SPEED_OF_LIGHT)
}

pub fn carrier_frequency(wavelength: f64) -> f64 {
    SPEED_OF_LIGHT / wavelength
}

/// Effective nonlinear length (1 - e^{-alpha L}) / alpha, in the units of `length`.
pub fn effective_length(alpha_per_unit: f64, length: f64) -> f64 {
    if alpha_per_unit == 0.0 {
        length
    } else {
        (1.0 - (-alpha_per_unit * length).exp()) / alpha_per_unit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn beta2_of_smf_and_dcf() {
        assert_relative_eq!(d_to_beta2(17.0, 1550e-9), -2.1675e-26, max_relative = 1e-3);
        assert_relative_eq!(d_to_beta2(-80.0, 1550e-9), 1.0203e-25, max_relative = 1e-3);
        assert_eq!(d_to_beta2(0.0, 1550e-9), 0.0);
    }

    #[test]
    fn beta2_is_linear_in_d() {
        for a in [-3.0, 0.5, 2.0, 11.0] {
            let lhs = d_to_beta2(a * 17.0, 1550e-9);
            let rhs = a * d_to_beta2(17.0, 1550e-9);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-14);
        }
    }

    #[test]
    fn smf_effective_length() {
        let alpha = alpha_db_km_to_per_m(0.2) * 1e3;
        assert!((effective_length(alpha, 72.0) - 20.93).abs() < 0.01);
    }

    #[test]
    fn dbm_round_trip() {
        assert_relative_eq!(dbm_to_watt(0.0), 1e-3);
        assert_relative_eq!(watt_to_dbm(dbm_to_watt(-4.0)), -4.0, epsilon = 1e-12);
    }
}
