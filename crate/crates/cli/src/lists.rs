//! Value-list syntax shared by the grid flags.
//!
//! Accepted forms, combinable with commas:
//! - `0.05` a single value
//! - `2..9` an inclusive integer range, or `1..2.5:0.05` with a step
//! - `10,15,...,49` an arithmetic progression continued from the two values
//!   before the ellipsis up to the value after it, which is always included

use anyhow::{anyhow, bail, Context, Result};

/// Rounds away accumulated step error so that `1 + 20 * 0.05` prints as 2.
fn tidy(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

fn parse_value(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .with_context(|| format!("'{s}' is not a number"))?;
    if !v.is_finite() {
        bail!("'{s}' is not finite");
    }
    Ok(v)
}

fn range(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        bail!("range step must be positive");
    }
    if hi < lo {
        bail!("range end {hi} is below its start {lo}");
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| tidy(lo + i as f64 * step)).collect())
}

pub fn parse_list(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let mut out: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < parts.len() {
        let p = parts[i];
        if p == "..." {
            let (a, b) = match out.as_slice() {
                [.., a, b] => (*a, *b),
                _ => bail!("'...' needs two values before it"),
            };
            let end = parts
                .get(i + 1)
                .ok_or_else(|| anyhow!("'...' needs a value after it"))
                .and_then(|s| parse_value(s))?;
            let step = b - a;
            if !(step > 0.0) {
                bail!("values before '...' must increase");
            }
            let mut k = 1;
            loop {
                let v = tidy(b + k as f64 * step);
                if v >= end - 1e-9 {
                    break;
                }
                out.push(v);
                k += 1;
            }
            out.push(end);
            i += 2;
        } else if let Some((lo, hi)) = p.split_once("..") {
            let (hi, step) = match hi.split_once(':') {
                Some((h, s)) => (h, parse_value(s)?),
                None => (hi, 1.0),
            };
            out.extend(range(parse_value(lo)?, parse_value(hi)?, step)?);
            i += 1;
        } else if p.is_empty() {
            bail!("empty entry in list '{spec}'");
        } else {
            out.push(parse_value(p)?);
            i += 1;
        }
    }
    Ok(out)
}

pub fn parse_int_list(spec: &str) -> Result<Vec<u32>> {
    parse_list(spec)?
        .into_iter()
        .map(|v| {
            if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
                Err(anyhow!("'{v}' is not a nonnegative integer"))
            } else {
                Ok(v as u32)
            }
        })
        .collect()
}
