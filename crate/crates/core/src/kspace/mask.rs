use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Column undersampling mask over a centered spectrum.
///
/// Column `j` and its conjugate partner `(width - j) % width` are always
/// sampled together, so a real image stays real under undersampling and data
/// consistency.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    width: usize,
    columns: Vec<bool>,
    accel: u32,
    center_fraction: f64,
    seed: u64,
}

/// Number of always-sampled center columns.
pub(crate) fn center_count(width: usize, center_fraction: f64) -> usize {
    (center_fraction * width as f64).round() as usize
}

fn mirror(j: usize, width: usize) -> usize {
    (width - j) % width
}

impl SamplingMask {
    /// Wrap an explicit column pattern (no symmetry requirement).
    pub fn from_columns(columns: Vec<bool>, accel: u32, center_fraction: f64, seed: u64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidArgument("empty mask".into()));
        }
        Ok(Self {
            width: columns.len(),
            columns,
            accel,
            center_fraction,
            seed,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn accel(&self) -> u32 {
        self.accel
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sampled(&self) -> usize {
        self.columns.iter().filter(|&&c| c).count()
    }

    /// Indices of the forced center block.
    pub fn center_columns(&self) -> std::ops::Range<usize> {
        let n = center_count(self.width, self.center_fraction);
        let pad = (self.width - n + 1) / 2;
        pad..pad + n
    }
}

/// Random column mask in the fastMRI style: a fully sampled center block of
/// `round(center_fraction * width)` columns plus random outer columns, with
/// the outer sampling probability chosen so the expected number of sampled
/// columns is `width / accel`.
pub fn make_mask(width: usize, accel: u32, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    if width < 2 || !width.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(width));
    }
    if accel == 0 {
        return Err(Error::InvalidArgument("acceleration must be positive".into()));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "center fraction {center_fraction} outside (0, 1)"
        )));
    }
    let budget = width as f64 / accel as f64;
    let n_center = center_count(width, center_fraction);
    if n_center as f64 > budget {
        return Err(Error::InfeasibleMask(format!(
            "{n_center} center columns exceed the budget of {budget} at acceleration {accel}"
        )));
    }
    let mut columns = vec![false; width];
    let pad = (width - n_center + 1) / 2;
    for j in pad..pad + n_center {
        columns[j] = true;
        columns[mirror(j, width)] = true;
    }
    let forced = columns.iter().filter(|&&c| c).count();
    let free = width - forced;
    let p = if free == 0 {
        0.0
    } else {
        ((budget - forced as f64) / free as f64).clamp(0.0, 1.0)
    };
    let mut rng = SplitMix64::new(seed);
    for j in 0..width {
        let m = mirror(j, width);
        if m < j || columns[j] {
            continue;
        }
        if rng.next_f64() < p {
            columns[j] = true;
            columns[m] = true;
        }
    }
    Ok(SamplingMask {
        width,
        columns,
        accel,
        center_fraction,
        seed,
    })
}

/// Text format: header line `width accel center_fraction seed`, then one
/// `0`/`1` line per column.
pub fn write_mask<W: Write>(mut w: W, mask: &SamplingMask) -> Result<()> {
    writeln!(w, "{} {} {} {}", mask.width, mask.accel, mask.center_fraction, mask.seed)?;
    for &c in &mask.columns {
        writeln!(w, "{}", u8::from(c))?;
    }
    Ok(())
}

pub fn read_mask<R: BufRead>(r: R) -> Result<SamplingMask> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty mask file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let bad = |what: &str| Error::Format(format!("mask header: bad {what} in {header:?}"));
    if fields.len() != 4 {
        return Err(bad("field count"));
    }
    let width: usize = fields[0].parse().map_err(|_| bad("width"))?;
    let accel: u32 = fields[1].parse().map_err(|_| bad("accel"))?;
    let center_fraction: f64 = fields[2].parse().map_err(|_| bad("center_fraction"))?;
    let seed: u64 = fields[3].parse().map_err(|_| bad("seed"))?;
    let mut columns = Vec::with_capacity(width);
    for line in lines {
        let line = line?;
        match line.trim() {
            "0" => columns.push(false),
            "1" => columns.push(true),
            "" => continue,
            other => return Err(Error::Format(format!("mask column {other:?}"))),
        }
    }
    if columns.len() != width {
        return Err(Error::Format(format!("{} columns for width {width}", columns.len())));
    }
    SamplingMask::from_columns(columns, accel, center_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_columns_are_forced() {
        let m = make_mask(32, 4, 0.08, 3).unwrap();
        let center = m.center_columns();
        assert_eq!(center.len(), 3);
        assert_eq!(center, 15..18);
        assert!(center.clone().all(|j| m.columns()[j]));
    }

    #[test]
    fn no_acceleration_samples_everything() {
        let m = make_mask(32, 1, 0.08, 9).unwrap();
        assert!(m.columns().iter().all(|&c| c));
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(make_mask(64, 8, 0.04, 77).unwrap(), make_mask(64, 8, 0.04, 77).unwrap());
        assert_ne!(
            make_mask(64, 4, 0.08, 1).unwrap().columns(),
            make_mask(64, 4, 0.08, 2).unwrap().columns()
        );
    }

    #[test]
    fn conjugate_symmetric() {
        for seed in 0..50 {
            let m = make_mask(32, 4, 0.08, seed).unwrap();
            for j in 0..32 {
                assert_eq!(m.columns()[j], m.columns()[mirror(j, 32)]);
            }
        }
    }

    #[test]
    fn infeasible_center_budget() {
        assert!(matches!(make_mask(32, 10, 0.5, 0), Err(Error::InfeasibleMask(_))));
        assert!(make_mask(32, 4, 0.0, 0).is_err());
        assert!(make_mask(32, 4, 1.0, 0).is_err());
    }

    #[test]
    fn expected_sampling_fraction() {
        let total: usize = (0..1000).map(|s| make_mask(64, 4, 0.08, s).unwrap().sampled()).sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 16.0).abs() <= 1.6, "mean sampled columns {mean}");
    }

    #[test]
    fn text_roundtrip() {
        let m = make_mask(32, 6, 0.08, 123).unwrap();
        let mut buf = Vec::new();
        write_mask(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("32 6 0.08 123\n"));
        assert_eq!(text.lines().count(), 33);
        assert_eq!(read_mask(&buf[..]).unwrap(), m);
        assert!(read_mask(&b"32 6 0.08\n"[..]).is_err());
    }
}
