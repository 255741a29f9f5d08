//! Sweep aggregation and deterministic report emission.
//!
//! A sweep is a flat list of rows, one per configuration cell; emitters turn
//! the same in-memory report into JSON, CSV, or a static SVG line chart with
//! identical bytes on every run. Wall-clock timings are kept on the rows for
//! interactive inspection but never serialized, so reruns of the same seed
//! produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;

/// One configuration cell: the label, the knobs that produced it, and the
/// score statistics over the scene batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub policy: String,
    pub fuse: String,
    pub k: usize,
    pub rot_std: f64,
    pub trans_std: f64,
    /// Scenes aggregated into this row.
    pub scenes: usize,
    pub mean_map: f64,
    /// Population standard deviation of mAP over scenes.
    pub std_map: f64,
    /// Mean AP per class, in class index order.
    pub mean_ap: [f64; 3],
    /// Seconds spent producing this row; intentionally not serialized.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// A named collection of sweep rows plus the seed that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Incremental mean/std aggregation for one row.
#[derive(Debug, Clone, Default)]
pub struct RowAccumulator {
    maps: Vec<f64>,
    aps: [Vec<f64>; 3],
}

impl RowAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, map: f64, aps: [f64; 3]) {
        self.maps.push(map);
        for (store, ap) in self.aps.iter_mut().zip(aps) {
            store.push(ap);
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        self,
        label: String,
        policy: String,
        fuse: String,
        k: usize,
        rot_std: f64,
        trans_std: f64,
        wall_seconds: f64,
    ) -> SweepRow {
        let n = self.maps.len();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let mean_map = mean(&self.maps);
        let std_map = if n == 0 {
            0.0
        } else {
            (self.maps.iter().map(|m| (m - mean_map).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        SweepRow {
            label,
            policy,
            fuse,
            k,
            rot_std,
            trans_std,
            scenes: n,
            mean_map,
            std_map,
            mean_ap: [mean(&self.aps[0]), mean(&self.aps[1]), mean(&self.aps[2])],
            wall_seconds,
        }
    }
}

/// Output formats understood by [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Svg => "svg",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::InvalidParameter(format!(
                "unknown report format '{other}' (expected json, csv, or svg)"
            ))),
        }
    }
}

const CSV_HEADER: &str =
    "label,policy,fuse,k,rot_std,trans_std,scenes,mean_map,std_map,ap_divider,ap_ped_crossing,ap_boundary";

impl SweepReport {
    /// CSV rendering: always a header line, one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.label,
                r.policy,
                r.fuse,
                r.k,
                r.rot_std,
                r.trans_std,
                r.scenes,
                r.mean_map,
                r.std_map,
                r.mean_ap[0],
                r.mean_ap[1],
                r.mean_ap[2],
            ));
        }
        out
    }

    /// Static SVG line chart: rows along the x axis, one polyline per metric
    /// series (mAP plus the three per-class APs), y fixed to [0, 1].
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const LEFT: f64 = 60.0;
        const RIGHT: f64 = 500.0;
        const TOP: f64 = 40.0;
        const BOTTOM: f64 = 330.0;

        let x_of = |i: usize| {
            if self.rows.len() <= 1 {
                (LEFT + RIGHT) / 2.0
            } else {
                LEFT + (RIGHT - LEFT) * i as f64 / (self.rows.len() - 1) as f64
            }
        };
        let y_of = |v: f64| BOTTOM - (BOTTOM - TOP) * v.clamp(0.0, 1.0);

        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
             font-family=\"sans-serif\" font-size=\"11\">\n"
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"22\" font-size=\"14\">{}</text>\n",
            LEFT,
            xml_escape(&self.kind)
        ));
        // Axes and horizontal grid lines.
        for tick in 0..=4 {
            let v = tick as f64 / 4.0;
            let y = y_of(v);
            s.push_str(&format!(
                "  <line x1=\"{LEFT:.2}\" y1=\"{y:.2}\" x2=\"{RIGHT:.2}\" y2=\"{y:.2}\" \
                 stroke=\"#cccccc\" stroke-width=\"1\"/>\n"
            ));
            s.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>\n",
                LEFT - 6.0,
                y + 4.0
            ));
        }
        s.push_str(&format!(
            "  <line x1=\"{LEFT:.2}\" y1=\"{TOP:.2}\" x2=\"{LEFT:.2}\" y2=\"{BOTTOM:.2}\" \
             stroke=\"#333333\" stroke-width=\"1\"/>\n"
        ));
        // Row labels along the x axis.
        for (i, row) in self.rows.iter().enumerate() {
            let x = x_of(i);
            s.push_str(&format!(
                "  <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"end\" \
                 transform=\"rotate(-35 {x:.2} {:.2})\">{}</text>\n",
                BOTTOM + 16.0,
                BOTTOM + 16.0,
                xml_escape(&row.label)
            ));
        }
        // One polyline per metric series.
        let series: [(&str, &str, Box<dyn Fn(&SweepRow) -> f64>); 4] = [
            ("mAP", "#1f77b4", Box::new(|r: &SweepRow| r.mean_map)),
            ("divider", "#d62728", Box::new(|r: &SweepRow| r.mean_ap[0])),
            ("ped_crossing", "#2ca02c", Box::new(|r: &SweepRow| r.mean_ap[1])),
            ("boundary", "#9467bd", Box::new(|r: &SweepRow| r.mean_ap[2])),
        ];
        for (si, (name, color, value)) in series.iter().enumerate() {
            if !self.rows.is_empty() {
                let pts: Vec<String> = self
                    .rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| format!("{:.2},{:.2}", x_of(i), y_of(value(r))))
                    .collect();
                s.push_str(&format!(
                    "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" \
                     points=\"{}\"/>\n",
                    pts.join(" ")
                ));
            }
            let ly = TOP + 16.0 * si as f64;
            s.push_str(&format!(
                "  <line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
                 stroke=\"{color}\" stroke-width=\"2\"/>\n",
                RIGHT + 10.0,
                RIGHT + 34.0
            ));
            s.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{:.2}\">{name}</text>\n",
                RIGHT + 40.0,
                ly + 4.0
            ));
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes the report in each requested format under `dir` with the given
    /// file stem; returns the paths written, in format order.
    pub fn emit(&self, dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut written = Vec::with_capacity(formats.len());
        for f in formats {
            let path = dir.join(format!("{stem}.{}", f.extension()));
            match f {
                ReportFormat::Json => write_json(&path, self)?,
                ReportFormat::Csv => fs::write(&path, self.to_csv())
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
                ReportFormat::Svg => fs::write(&path, self.to_svg())
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
            }
            written.push(path);
        }
        Ok(written)
    }
}

/// Free-function form of [`SweepReport::emit`].
pub fn emit_report(
    report: &SweepReport,
    dir: &Path,
    stem: &str,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    report.emit(dir, stem, formats)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
