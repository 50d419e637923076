//! Strict parsing of unit-suffixed values such as `"0.2 dB/km"`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    /// km
    Length,
    /// dB/km
    Attenuation,
    /// ps/(nm km)
    DispersionCoefficient,
    /// ps/nm
    Dispersion,
    /// 1/(W km)
    Nonlinearity,
    /// ps/sqrt(km)
    PmdCoefficient,
    /// dB
    Decibel,
    /// dBm
    Power,
    /// Hz
    Frequency,
    /// Bd
    SymbolRate,
    /// m
    Wavelength,
    /// rad
    Phase,
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dim::Length => "length (km, m)",
            Dim::Attenuation => "attenuation (dB/km)",
            Dim::DispersionCoefficient => "dispersion coefficient (ps/nm/km)",
            Dim::Dispersion => "accumulated dispersion (ps/nm)",
            Dim::Nonlinearity => "nonlinear coefficient (1/W/km)",
            Dim::PmdCoefficient => "PMD coefficient (ps/sqrt(km))",
            Dim::Decibel => "ratio (dB)",
            Dim::Power => "power (dBm, mW, W)",
            Dim::Frequency => "frequency (Hz, kHz, MHz, GHz, THz)",
            Dim::SymbolRate => "symbol rate (Bd, kBd, MBd, GBd)",
            Dim::Wavelength => "wavelength (nm, um, m)",
            Dim::Phase => "phase (rad, mrad)",
        };
        f.write_str(s)
    }
}

fn scale(dim: Dim, unit: &str) -> Option<f64> {
    let u = unit.replace(['(', ')', ' ', '·', '*'], "");
    let s = match (dim, u.as_str()) {
        (Dim::Length, "km") => 1.0,
        (Dim::Length, "m") => 1e-3,
        (Dim::Attenuation, "dB/km") => 1.0,
        (Dim::DispersionCoefficient, "ps/nm/km" | "ps/nmkm") => 1.0,
        (Dim::Dispersion, "ps/nm") => 1.0,
        (Dim::Nonlinearity, "1/W/km" | "1/Wkm" | "/W/km" | "W^-1km^-1") => 1.0,
        (Dim::PmdCoefficient, "ps/sqrtkm" | "ps/√km") => 1.0,
        (Dim::Decibel, "dB") => 1.0,
        (Dim::Frequency, "Hz") => 1.0,
        (Dim::Frequency, "kHz") => 1e3,
        (Dim::Frequency, "MHz") => 1e6,
        (Dim::Frequency, "GHz") => 1e9,
        (Dim::Frequency, "THz") => 1e12,
        (Dim::SymbolRate, "Bd" | "baud") => 1.0,
        (Dim::SymbolRate, "kBd" | "kbaud") => 1e3,
        (Dim::SymbolRate, "MBd" | "Mbaud") => 1e6,
        (Dim::SymbolRate, "GBd" | "Gbaud") => 1e9,
        (Dim::Wavelength, "nm") => 1e-9,
        (Dim::Wavelength, "um" | "µm") => 1e-6,
        (Dim::Wavelength, "m") => 1.0,
        (Dim::Phase, "rad") => 1.0,
        (Dim::Phase, "mrad") => 1e-3,
        _ => return None,
    };
    Some(s)
}

/// Parses `"<number> <unit>"` into the canonical unit of `dim` (see the
/// variant docs). Power converts mW and W to dBm.
pub fn parse(text: &str, dim: Dim) -> Result<f64, String> {
    let t = text.trim();
    let split = t
        .find(|c: char| !(c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E')))
        .ok_or_else(|| format!("'{t}' has no unit; expected {dim}"))?;
    let (num, unit) = t.split_at(split);
    let value: f64 = num.trim().parse().map_err(|_| format!("'{t}': cannot read the number '{}'", num.trim()))?;
    if !value.is_finite() {
        return Err(format!("'{t}' is not finite"));
    }
    let unit = unit.trim();
    if dim == Dim::Power {
        return match unit {
            "dBm" => Ok(value),
            "mW" if value > 0.0 => Ok(10.0 * value.log10()),
            "W" if value > 0.0 => Ok(10.0 * (value * 1e3).log10()),
            "mW" | "W" => Err(format!("'{t}': power must be positive")),
            _ => Err(format!("'{t}': unit '{unit}' is not a {dim}")),
        };
    }
    scale(dim, unit).map(|s| value * s).ok_or_else(|| format!("'{t}': unit '{unit}' is not a {dim}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepted_forms() {
        assert_eq!(parse("0.2 dB/km", Dim::Attenuation), Ok(0.2));
        assert_eq!(parse("17 ps/(nm km)", Dim::DispersionCoefficient), Ok(17.0));
        assert_eq!(parse("17 ps/nm/km", Dim::DispersionCoefficient), Ok(17.0));
        assert_eq!(parse("-1224 ps/nm", Dim::Dispersion), Ok(-1224.0));
        assert_eq!(parse("72 km", Dim::Length), Ok(72.0));
        assert_eq!(parse("500 m", Dim::Length), Ok(0.5));
        assert_eq!(parse("37.5 GHz", Dim::Frequency), Ok(37.5e9));
        assert_eq!(parse("32 GBd", Dim::SymbolRate), Ok(32e9));
        assert_eq!(parse("1.3 1/W/km", Dim::Nonlinearity), Ok(1.3));
        assert_eq!(parse("0.1 ps/sqrt(km)", Dim::PmdCoefficient), Ok(0.1));
        assert_eq!(parse("-4 dBm", Dim::Power), Ok(-4.0));
        assert!((parse("1 mW", Dim::Power).unwrap()).abs() < 1e-12);
        assert!((parse("1 W", Dim::Power).unwrap() - 30.0).abs() < 1e-12);
        assert!((parse("1550 nm", Dim::Wavelength).unwrap() - 1550e-9).abs() < 1e-20);
        assert_eq!(parse("1e-3 rad", Dim::Phase), Ok(1e-3));
    }

    #[test]
    fn rejected_forms() {
        assert!(parse("0.2", Dim::Attenuation).is_err());
        assert!(parse("0.2 dB", Dim::Attenuation).is_err());
        assert!(parse("72 kg", Dim::Length).is_err());
        assert!(parse("abc km", Dim::Length).is_err());
        assert!(parse("-1 mW", Dim::Power).is_err());
        assert!(parse("inf km", Dim::Length).is_err());
    }
}
