use crate::baselines::Method;
use crate::dataset::Task;
use crate::error::{config_err, Result};

/// `start, start+step, …` up to `end` inclusive (within rounding).
pub fn linear_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || end < start {
        return config_err("linear grid needs start <= end and a positive step");
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| round12(start + i as f64 * step)).collect())
}

/// `n` points whose distance from 1 is log-spaced between `1 - start` and
/// `1 - end`. Suited to thresholds approaching 1.
pub fn log_grid(start: f64, end: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 || !(start > 0.0 && end < 1.0 && start < end) {
        return config_err("log grid needs 0 < start < end < 1 and n >= 1");
    }
    let (a, b) = ((1.0 - start).ln(), (1.0 - end).ln());
    Ok(spaced(a, b, n).map(|x| round12(1.0 - x.exp())).collect())
}

/// `n` points evenly spaced in log-odds between `start` and `end`.
pub fn logit_grid(start: f64, end: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 || !(start > 0.0 && end < 1.0 && start < end) {
        return config_err("logit grid needs 0 < start < end < 1 and n >= 1");
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    Ok(spaced(logit(start), logit(end), n)
        .map(|z| 1.0 / (1.0 + (-z).exp()))
        .collect())
}

fn spaced(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 })
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Parses `a:b:step`, `log:a:b:n`, `logit:a:b:n` or a comma list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| crate::Error::Config(format!("bad number {s:?} in grid {spec:?}")))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        ["log", a, b, n] | ["logit", a, b, n] => {
            let n = n
                .trim()
                .parse::<usize>()
                .map_err(|_| crate::Error::Config(format!("bad count in grid {spec:?}")))?;
            if parts[0] == "log" {
                log_grid(num(a)?, num(b)?, n)?
            } else {
                logit_grid(num(a)?, num(b)?, n)?
            }
        }
        [a, b, step] => linear_grid(num(a)?, num(b)?, num(step)?)?,
        [list] => list.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return config_err(format!("unrecognized grid {spec:?}")),
    };
    if grid.is_empty() {
        return config_err("empty grid");
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return config_err(format!("grid value {t} outside (0, 1)"));
    }
    Ok(grid)
}

/// Sweep grid used when none is given.
pub fn default_grid(task: Task, method: Method) -> Vec<f64> {
    match (method, task) {
        (Method::Main, Task::Insertion) => linear_grid(0.02, 0.20, 0.01),
        (Method::Main, Task::Deletion) => log_grid(0.90, 0.999, 12),
        _ => logit_grid(1e-4, 0.9999, 41),
    }
    .expect("static grid")
}
