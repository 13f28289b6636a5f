//! Voxel histograms of predicted and true error, rendered as a static SVG.

use std::fmt::Write as _;
use std::sync::Mutex;

use regerr_core::dataset::PatchRecord;
use regerr_net::eval::Predictor;
use regerr_net::NetError;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_mm: f64,
    pub predicted: Vec<u64>,
    pub truth: Vec<u64>,
}

impl Histogram {
    pub fn new(bin_mm: f64) -> Self {
        Histogram { bin_mm, predicted: Vec::new(), truth: Vec::new() }
    }

    fn bump(bins: &mut Vec<u64>, v: f32, width: f64) {
        let b = (f64::from(v.max(0.0)) / width) as usize;
        if bins.len() <= b {
            bins.resize(b + 1, 0);
        }
        bins[b] += 1;
    }

    pub fn add(&mut self, predicted: &[f32], truth: &[f32]) {
        for &v in predicted {
            Self::bump(&mut self.predicted, v, self.bin_mm);
        }
        for &v in truth {
            Self::bump(&mut self.truth, v, self.bin_mm);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty() && self.predicted.is_empty()
    }

    pub fn to_svg(&self, title: &str) -> String {
        let (w, h) = (640.0, 360.0);
        let (left, right, top, bottom) = (56.0, 16.0, 36.0, 44.0);
        let nb = self.predicted.len().max(self.truth.len()).max(1);
        let peak = self.predicted.iter().chain(&self.truth).copied().max().unwrap_or(0).max(1) as f64;
        let (pw, ph) = (w - left - right, h - top - bottom);
        let x = |b: usize| left + pw * b as f64 / nb as f64;
        let y = |c: u64| top + ph * (1.0 - c as f64 / peak);
        let steps = |bins: &[u64]| {
            let mut pts = format!("{:.1},{:.1}", x(0), y(0));
            for b in 0..nb {
                let c = bins.get(b).copied().unwrap_or(0);
                let _ = write!(pts, " {:.1},{:.1} {:.1},{:.1}", x(b), y(c), x(b + 1), y(c));
            }
            let _ = write!(pts, " {:.1},{:.1}", x(nb), y(0));
            pts
        };

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
        let _ = writeln!(s, r#"<polyline fill="none" stroke="black" points="{left},{top} {left},{} {},{}"/>"#, top + ph, left + pw, top + ph);
        let max_mm = nb as f64 * self.bin_mm;
        for i in 0..=4 {
            let v = max_mm * i as f64 / 4.0;
            let px = left + pw * i as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, top + ph + 16.0);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">error (mm)</text>"#, left + pw / 2.0, h - 8.0);
        let _ = writeln!(s, r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">voxels</text>"#, top + ph / 2.0, top + ph / 2.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 4.0, top + 4.0, peak as u64);
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##, steps(&self.truth));
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#d62728" stroke-width="1.5" points="{}"/>"##, steps(&self.predicted));
        let lx = left + pw - 120.0;
        let _ = writeln!(s, r##"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="#1f77b4" stroke-width="2"/><text x="{}" y="{}">true</text>"##, top + 10.0, lx + 20.0, top + 10.0, lx + 26.0, top + 14.0);
        let _ = writeln!(s, r##"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="#d62728" stroke-width="2"/><text x="{}" y="{}">predicted</text>"##, top + 28.0, lx + 20.0, top + 28.0, lx + 26.0, top + 32.0);
        s.push_str("</svg>\n");
        s
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Passes predictions through while binning them against the ground truth.
pub struct Recording<'a> {
    pub inner: &'a dyn Predictor,
    pub hist: Mutex<Histogram>,
}

impl Predictor for Recording<'_> {
    fn name(&self) -> String {
        self.inner.name()
    }
    fn predict(&self, rec: &PatchRecord) -> Result<Vec<f32>, NetError> {
        let phi = self.inner.predict(rec)?;
        self.hist.lock().expect("histogram lock").add(&phi, &rec.error);
        Ok(phi)
    }
}
