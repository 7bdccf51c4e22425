//! Saliency evaluation metrics: MAE, maximum F-measure, S-measure, and
//! maximum E-measure, with a per-group report.
//!
//! Conventions pinned here (toolbox versions differ on edge cases):
//! threshold sweeps binarize at pred*255 >= t for integer t in 0..=255;
//! denominators carry eps = 1e-8; block similarity in the S-measure region
//! term uses (2 x̄ ȳ)(2 σ_xy) / ((x̄²+ȳ²)(σ_x²+σ_y²)) with sample (n-1)
//! variances, and flat equal blocks score 1.

use crate::error::{CosalError, Result};

pub const METRIC_EPS: f64 = 1e-8;
const BETA2: f64 = 0.3;

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(CosalError::shape("pred/gt length mismatch"));
    }
    if pred.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(CosalError::invalid("pred values must lie in [0,1]"));
    }
    if gt.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(CosalError::invalid("gt must be binary"));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Suffix counts over the 256-level sweep: tp[t] and predicted-positive
/// pp[t] for binarization pred*255 >= t.
fn threshold_counts(pred: &[f64], gt: &[f64]) -> ([usize; 257], [usize; 257]) {
    let mut tp_hist = [0usize; 256];
    let mut pp_hist = [0usize; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        let level = (p * 255.0).floor().min(255.0) as usize;
        pp_hist[level] += 1;
        if g == 1.0 {
            tp_hist[level] += 1;
        }
    }
    let mut tp = [0usize; 257];
    let mut pp = [0usize; 257];
    for t in (0..256).rev() {
        tp[t] = tp[t + 1] + tp_hist[t];
        pp[t] = pp[t + 1] + pp_hist[t];
    }
    (tp, pp)
}

pub fn f_measure_max(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    let npos = gt.iter().filter(|&&g| g == 1.0).count();
    if npos == 0 {
        // empty ground truth: perfect only for an all-zero prediction
        return Ok(if pred.iter().all(|&p| p == 0.0) { 1.0 } else { 0.0 });
    }
    let (tp, pp) = threshold_counts(pred, gt);
    let mut best = 0.0f64;
    for t in 0..256 {
        let (tp_t, pp_t) = (tp[t] as f64, pp[t] as f64);
        if pp_t == 0.0 || tp_t == 0.0 {
            continue;
        }
        let p = tp_t / pp_t;
        let r = tp_t / npos as f64;
        let denom = BETA2 * p + r;
        let f = if denom == 0.0 { 0.0 } else { (1.0 + BETA2) * p * r / denom };
        best = best.max(f);
    }
    Ok(best)
}

pub fn e_measure_max(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let npos = gt.iter().filter(|&&g| g == 1.0).count();
    let (tp, pp) = threshold_counts(pred, gt);
    let mut best = 0.0f64;
    for t in 0..256 {
        let pp_t = pp[t] as f64;
        let mu_b = pp_t / n;
        let e_t = if npos == 0 {
            1.0 - mu_b
        } else if npos == pred.len() {
            mu_b
        } else {
            let mu_g = npos as f64 / n;
            let tp_t = tp[t] as f64;
            // four (gt, B) combinations with their counts
            let cells = [
                (1.0 - mu_g, 1.0 - mu_b, tp_t),
                (1.0 - mu_g, -mu_b, npos as f64 - tp_t),
                (-mu_g, 1.0 - mu_b, pp_t - tp_t),
                (-mu_g, -mu_b, n - npos as f64 - (pp_t - tp_t)),
            ];
            let mut acc = 0.0;
            for (pg, pb, count) in cells {
                let xi = 2.0 * pg * pb / (pg * pg + pb * pb + METRIC_EPS);
                acc += count * (xi + 1.0) * (xi + 1.0) / 4.0;
            }
            acc / n
        };
        best = best.max(e_t);
    }
    Ok(best)
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in xs {
        sum += x;
        n += 1;
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

/// Object score 2x̄ / (x̄² + 1 + 2σ_x + eps) over the values selected by
/// `keep`, with sample standard deviation.
fn object_score(vals: &[f64], keep: &[bool]) -> f64 {
    let (m, n) = mean(vals.iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v));
    if n == 0 {
        return 0.0;
    }
    let var = if n > 1 {
        vals.iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| (v - m) * (v - m))
            .sum::<f64>()
            / (n - 1) as f64
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + 2.0 * var.sqrt() + METRIC_EPS)
}

fn block_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    if x.len() > 1 {
        for (&a, &b) in x.iter().zip(y) {
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
            cxy += (a - mx) * (b - my);
        }
        let d = n - 1.0;
        vx /= d;
        vy /= d;
        cxy /= d;
    }
    if vx == 0.0 && vy == 0.0 {
        return if mx == my { 1.0 } else { 0.0 };
    }
    let num = 4.0 * mx * my * cxy;
    let den = (mx * mx + my * my) * (vx + vy);
    num / (den + METRIC_EPS)
}

pub fn s_measure(pred: &[f64], gt: &[f64], width: usize, height: usize, alpha: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if width * height != pred.len() {
        return Err(CosalError::shape("s_measure dims do not match payload"));
    }
    let npos = gt.iter().filter(|&&g| g == 1.0).count();
    let mean_pred = pred.iter().sum::<f64>() / pred.len() as f64;
    if npos == 0 {
        return Ok((1.0 - mean_pred).clamp(0.0, 1.0));
    }
    if npos == pred.len() {
        return Ok(mean_pred.clamp(0.0, 1.0));
    }

    let mu = npos as f64 / gt.len() as f64;
    let fg: Vec<bool> = gt.iter().map(|&g| g == 1.0).collect();
    let bg: Vec<bool> = fg.iter().map(|&b| !b).collect();
    let inv_pred: Vec<f64> = pred.iter().map(|&p| 1.0 - p).collect();
    let s_object = mu * object_score(pred, &fg) + (1.0 - mu) * object_score(&inv_pred, &bg);

    // region term: 4 blocks split at the rounded gt foreground centroid
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for py in 0..height {
        for px in 0..width {
            if gt[py * width + px] == 1.0 {
                sx += px as f64;
                sy += py as f64;
            }
        }
    }
    let cx = ((sx / npos as f64).round() as usize).clamp(1, width - 1);
    let cy = ((sy / npos as f64).round() as usize).clamp(1, height - 1);
    let mut s_region = 0.0;
    for (x0, x1, y0, y1) in
        [(0, cx, 0, cy), (cx, width, 0, cy), (0, cx, cy, height), (cx, width, cy, height)]
    {
        let mut bp = Vec::with_capacity((x1 - x0) * (y1 - y0));
        let mut bg_block = Vec::with_capacity(bp.capacity());
        for py in y0..y1 {
            for px in x0..x1 {
                bp.push(pred[py * width + px]);
                bg_block.push(gt[py * width + px]);
            }
        }
        let weight = bp.len() as f64 / pred.len() as f64;
        s_region += weight * block_ssim(&bp, &bg_block);
    }

    Ok((alpha * s_object + (1.0 - alpha) * s_region).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub name: String,
    pub n_images: usize,
    pub e_max: f64,
    pub s: f64,
    pub f_max: f64,
    pub mae: f64,
}

/// Running per-group accumulator of per-image metric values.
#[derive(Debug, Default)]
pub struct GroupAccumulator {
    e: f64,
    s: f64,
    f: f64,
    m: f64,
    n: usize,
}

impl GroupAccumulator {
    pub fn push(&mut self, pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<()> {
        self.e += e_measure_max(pred, gt)?;
        self.s += s_measure(pred, gt, width, height, 0.5)?;
        self.f += f_measure_max(pred, gt)?;
        self.m += mae(pred, gt)?;
        self.n += 1;
        Ok(())
    }

    pub fn finish(self, name: impl Into<String>) -> Result<GroupMetrics> {
        if self.n == 0 {
            return Err(CosalError::invalid("empty metric group"));
        }
        let d = self.n as f64;
        Ok(GroupMetrics {
            name: name.into(),
            n_images: self.n,
            e_max: self.e / d,
            s: self.s / d,
            f_max: self.f / d,
            mae: self.m / d,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub groups: Vec<GroupMetrics>,
}

impl MetricsReport {
    /// Headline row: unweighted mean over groups.
    pub fn aggregate(&self) -> GroupMetrics {
        let d = self.groups.len() as f64;
        GroupMetrics {
            name: "ALL".to_string(),
            n_images: self.groups.iter().map(|g| g.n_images).sum(),
            e_max: self.groups.iter().map(|g| g.e_max).sum::<f64>() / d,
            s: self.groups.iter().map(|g| g.s).sum::<f64>() / d,
            f_max: self.groups.iter().map(|g| g.f_max).sum::<f64>() / d,
            mae: self.groups.iter().map(|g| g.mae).sum::<f64>() / d,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,n_images,Emax,S,Fmax,MAE\n");
        for g in self.groups.iter().chain(std::iter::once(&self.aggregate())) {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                g.name, g.n_images, g.e_max, g.s, g.f_max, g.mae
            ));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "group", "images", "Emax", "S", "Fmax", "MAE"
        );
        for g in self.groups.iter().chain(std::iter::once(&self.aggregate())) {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                g.name, g.n_images, g.e_max, g.s, g.f_max, g.mae
            ));
        }
        out
    }
}
