//! Parsing of numeric lists such as `0.1:1.0:0.1,1:10:1` or `10,50,90`.

use anyhow::{bail, Context, Result};

/// Values are snapped to this many decimals so accumulated steps compare equal.
const SNAP: f64 = 1e10;
const DEDUP_TOL: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    (x * SNAP).round() / SNAP
}

fn number(s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().with_context(|| format!("not a number: {s:?}"))?;
    if !v.is_finite() {
        bail!("not a finite number: {s:?}");
    }
    Ok(v)
}

/// Comma-separated items, each either a number or an inclusive `start:end:step`
/// range. The result is sorted with duplicates removed.
pub fn parse_list(spec: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [one] => out.push(number(one)?),
            [a, b, step] => {
                let (a, b, step) = (number(a)?, number(b)?, number(step)?);
                if step <= 0.0 || b < a {
                    bail!("range {item:?} needs start <= end and a positive step");
                }
                let n = ((b - a) / step + 1e-9).floor() as usize;
                out.extend((0..=n).map(|k| snap(a + k as f64 * step)));
            }
            _ => bail!("bad list item {item:?}; use a number or start:end:step"),
        }
    }
    if out.is_empty() {
        bail!("empty list {spec:?}");
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < DEDUP_TOL);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_alpha_grid_has_nineteen_values() {
        let v = parse_list("0.1:1.0:0.1,1:10:1").unwrap();
        assert_eq!(v.len(), 19);
        assert_eq!(v[0], 0.1);
        assert_eq!(v[2], 0.3);
        assert_eq!(v[9], 1.0);
        assert_eq!(v[18], 10.0);
    }

    #[test]
    fn plain_lists_and_errors() {
        assert_eq!(parse_list("90, 10,50").unwrap(), vec![10.0, 50.0, 90.0]);
        assert_eq!(parse_list("5:100:5").unwrap().len(), 20);
        assert!(parse_list("").is_err());
        assert!(parse_list("1:0:1").is_err());
        assert!(parse_list("0:1:0").is_err());
        assert!(parse_list("a").is_err());
        assert!(parse_list("1:2").is_err());
    }
}
