//! CSI standardization: power normalization, CFO phase removal and
//! detection-delay slope removal, plus the dataset record format.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::numerics::complex::expj;

#[derive(Debug, Error)]
pub enum CsiError {
    #[error("channel matrix is all zero")]
    ZeroChannel,
    #[error("first-antenna entry is zero at subcarrier {subcarrier}")]
    ZeroReference { subcarrier: usize },
    #[error("phase unwrap is ambiguous after subcarrier {subcarrier}")]
    AliasedDelay { subcarrier: usize },
    #[error("invalid channel: {0}")]
    Invalid(String),
    #[error("record {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `N × K` complex channel, row-major by antenna.
#[derive(Clone, Debug, PartialEq)]
pub struct Csi {
    n_antennas: usize,
    n_subcarriers: usize,
    data: Vec<Complex64>,
}

impl Csi {
    pub fn new(n_antennas: usize, n_subcarriers: usize, data: Vec<Complex64>) -> Result<Self, CsiError> {
        if n_antennas == 0 || n_subcarriers == 0 {
            return Err(CsiError::Invalid("need at least one antenna and one subcarrier".into()));
        }
        if data.len() != n_antennas * n_subcarriers {
            return Err(CsiError::Invalid(format!(
                "{n_antennas} × {n_subcarriers} channel given {} entries",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CsiError::Invalid("non-finite channel entry".into()));
        }
        Ok(Self { n_antennas, n_subcarriers, data })
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_subcarriers
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, n: usize, k: usize) -> Complex64 {
        self.data[n * self.n_subcarriers + k]
    }

    pub fn antenna(&self, n: usize) -> &[Complex64] {
        &self.data[n * self.n_subcarriers..(n + 1) * self.n_subcarriers]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt()
    }

    fn map_indexed(&self, f: impl Fn(usize, usize, Complex64) -> Complex64) -> Self {
        let k = self.n_subcarriers;
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i / k, i % k, v)).collect();
        Self { n_antennas: self.n_antennas, n_subcarriers: k, data }
    }
}

/// `(√N / ‖H‖_F) · H`.
pub fn power_normalize(h: &Csi) -> Result<Csi, CsiError> {
    let norm = h.frobenius_norm();
    if norm == 0.0 {
        return Err(CsiError::ZeroChannel);
    }
    let s = (h.n_antennas as f64).sqrt() / norm;
    Ok(h.map_indexed(|_, _, v| v * s))
}

/// Rotates each subcarrier so the first antenna's phase is zero.
pub fn remove_cfo(h: &Csi) -> Result<Csi, CsiError> {
    let rot = h
        .antenna(0)
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let n = v.norm();
            if n == 0.0 {
                Err(CsiError::ZeroReference { subcarrier: k })
            } else {
                Ok(v.conj() / n)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(h.map_indexed(|_, k, v| v * rot[k]))
}

/// Unwraps a phase sequence by adding `±2π` whenever adjacent values jump
/// by more than `π`.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let diff = p - phase[i - 1];
            if diff > PI {
                offset -= TAU * ((diff - PI) / TAU).ceil();
            } else if diff < -PI {
                offset += TAU * ((-diff - PI) / TAU).ceil();
            }
        }
        out.push(p + offset);
    }
    out
}

/// Least-squares slope of the first antenna's unwrapped phase against
/// subcarrier index.
pub fn delay_slope(h: &Csi) -> Result<f64, CsiError> {
    let k = h.n_subcarriers;
    if k < 2 {
        return Err(CsiError::Invalid("delay removal needs at least two subcarriers".into()));
    }
    let phase: Vec<f64> = h.antenna(0).iter().map(|v| v.arg()).collect();
    let unwrapped = unwrap_phase(&phase);
    if let Some(i) = unwrapped.windows(2).position(|w| (w[1] - w[0]).abs() >= PI * (1.0 - 1e-9)) {
        return Err(CsiError::AliasedDelay { subcarrier: i });
    }
    let mean_k = (k - 1) as f64 / 2.0;
    let mean_p = unwrapped.iter().sum::<f64>() / k as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, p) in unwrapped.iter().enumerate() {
        let dk = i as f64 - mean_k;
        num += dk * (p - mean_p);
        den += dk * dk;
    }
    Ok(num / den)
}

/// Removes the fitted linear phase `m·k` from every antenna.
pub fn remove_delay(h: &Csi) -> Result<Csi, CsiError> {
    let m = delay_slope(h)?;
    Ok(h.map_indexed(|_, k, v| v * expj(-m * k as f64)))
}

/// All three steps in order.
pub fn preprocess(h: &Csi) -> Result<Csi, CsiError> {
    remove_delay(&remove_cfo(&power_normalize(h)?)?)
}

/// `gain · H · e^{j(φ₀ + m·k)}` per subcarrier `k`.
pub fn inject_impairments(h: &Csi, phase_offset: f64, delay_slope: f64, gain: f64) -> Csi {
    h.map_indexed(|_, k, v| v * gain * expj(phase_offset + delay_slope * k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsiRecord {
    pub rx_pos: Vec3,
    pub tx_pos: Vec3,
    pub channel_re: Vec<f64>,
    pub channel_im: Vec<f64>,
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl CsiRecord {
    pub fn from_csi(rx_pos: Vec3, tx_pos: Vec3, h: &Csi, split: Option<Split>) -> Self {
        Self {
            rx_pos,
            tx_pos,
            channel_re: h.data.iter().map(|v| v.re).collect(),
            channel_im: h.data.iter().map(|v| v.im).collect(),
            n_antennas: h.n_antennas,
            n_subcarriers: h.n_subcarriers,
            split,
        }
    }

    pub fn csi(&self) -> Result<Csi, CsiError> {
        if self.channel_re.len() != self.channel_im.len() {
            return Err(CsiError::Invalid("real and imaginary parts differ in length".into()));
        }
        let data = self.channel_re.iter().zip(&self.channel_im).map(|(&re, &im)| Complex64::new(re, im)).collect();
        Csi::new(self.n_antennas, self.n_subcarriers, data)
    }

    pub fn with_csi(&self, h: &Csi) -> Self {
        Self::from_csi(self.rx_pos, self.tx_pos, h, self.split)
    }
}

/// Newline-delimited JSON records; blank lines are skipped.
pub fn read_records(r: impl BufRead) -> Result<Vec<CsiRecord>, CsiError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CsiRecord =
            serde_json::from_str(&line).map_err(|e| CsiError::Record { line: i + 1, message: e.to_string() })?;
        rec.csi().map_err(|e| CsiError::Record { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(mut w: impl Write, records: &[CsiRecord]) -> Result<(), CsiError> {
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| CsiError::Invalid(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Applies [`preprocess`] to every record, naming the failing one.
pub fn preprocess_records(records: &[CsiRecord]) -> Result<Vec<CsiRecord>, CsiError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let h = r.csi().and_then(|h| preprocess(&h));
            h.map(|h| r.with_csi(&h)).map_err(|e| CsiError::Record { line: i + 1, message: e.to_string() })
        })
        .collect()
}
