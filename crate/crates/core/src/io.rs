//! Plain-text scenario files.
//!
//! ```text
//! mecsim-scenario 1
//! [params]
//! a = 5.0000000000000000e-1
//! ...
//! [gain_sbs_hrd] 15 20
//! <15 lines of 20 whitespace-separated values>
//! ```
//!
//! Key/value sections hold scalars; matrix sections carry their shape in the
//! header and one row per line. Floats are written with 17 significant
//! digits, so a file reproduces the scenario exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::content::DemandProfile;
use crate::error::{Error, Result};
use crate::scenario::{Counts, Point, Scenario, SystemParams};

pub const MAGIC: &str = "mecsim-scenario";
pub const FORMAT_VERSION: u32 = 1;

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

fn kv(out: &mut String, section: &str, pairs: &[(&str, String)]) {
    writeln!(out, "[{section}]").unwrap();
    for (k, v) in pairs {
        writeln!(out, "{k} = {v}").unwrap();
    }
}

fn matrix(out: &mut String, name: &str, rows: usize, cols: usize, cell: impl Fn(usize, usize) -> String) {
    writeln!(out, "[{name}] {rows} {cols}").unwrap();
    if cols == 0 {
        return;
    }
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| cell(r, c)).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

fn points(out: &mut String, name: &str, p: &[Point]) {
    matrix(out, name, p.len(), 2, |r, c| f(if c == 0 { p[r].x } else { p[r].y }));
}

fn bits(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Serialise a scenario and the demand drawn for it.
pub fn write_scenario(s: &Scenario, d: &DemandProfile) -> String {
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\n");
    let p = &s.params;
    kv(
        &mut out,
        "params",
        &[
            ("bandwidth_hz", f(p.bandwidth_hz)),
            ("a", f(p.a)),
            ("t1_frac", f(p.t1_frac)),
            ("n_mbs", p.n_mbs.to_string()),
            ("isd_m", f(p.isd_m)),
            ("p_mbs_dbm", f(p.p_mbs_dbm)),
            ("p_sbs_dbm", f(p.p_sbs_dbm)),
            ("p_md_dbm", f(p.p_md_dbm)),
            ("noise_psd_dbm_hz", f(p.noise_psd_dbm_hz)),
            ("seed", p.seed.to_string()),
        ],
    );
    kv(
        &mut out,
        "counts",
        &[
            ("sbs_per_cell", s.counts.sbs_per_cell.to_string()),
            ("n_hrd", s.counts.n_hrd.to_string()),
            ("n_csd", s.counts.n_csd.to_string()),
        ],
    );
    points(&mut out, "mbs_pos", &s.mbs_pos);
    points(&mut out, "sbs_pos", &s.sbs_pos);
    points(&mut out, "hrd_pos", &s.hrd_pos);
    points(&mut out, "csd_pos", &s.csd_pos);
    let ns = s.n_sbs();
    matrix(&mut out, "sbs_cell", ns, 1, |r, _| s.sbs_cell[r].to_string());
    matrix(&mut out, "backhaul_mbs", ns, 1, |r, _| s.backhaul_mbs[r].to_string());
    matrix(&mut out, "gain_mbs_sbs", ns, 1, |r, _| f(s.gain_mbs_sbs[r]));
    let (r, c) = s.gain_sbs_hrd.dim();
    matrix(&mut out, "gain_sbs_hrd", r, c, |i, j| f(s.gain_sbs_hrd[(i, j)]));
    let (r, c) = s.gain_sbs_csd.dim();
    matrix(&mut out, "gain_sbs_csd", r, c, |i, j| f(s.gain_sbs_csd[(i, j)]));

    kv(&mut out, "demand", &[("file_size_bytes", f(d.file_size_bytes))]);
    let (r, c) = d.request.dim();
    matrix(&mut out, "request", r, c, |i, j| bits(d.request[(i, j)]));
    let (r, c) = d.cache.dim();
    matrix(&mut out, "cache", r, c, |i, j| bits(d.cache[(i, j)]));
    let nc = d.task_cycles.len();
    matrix(&mut out, "csd_task", nc, 4, |k, j| {
        f([d.task_input_bytes[k], d.task_cycles[k], d.local_cycles_per_s[k], d.csd_weight[k]][j])
    });
    matrix(&mut out, "sbs_capacity", ns, 2, |n, j| {
        f([d.edge_cycles_per_s[n], d.storage_bytes[n]][j])
    });
    matrix(&mut out, "hrd_weight", d.hrd_weight.len(), 1, |k, _| f(d.hrd_weight[k]));
    out
}

enum Section {
    Pairs(HashMap<String, (usize, String)>),
    Matrix {
        line: usize,
        shape: (usize, usize),
        rows: Vec<Vec<String>>,
    },
}

struct Parsed<'a> {
    path: &'a Path,
    sections: HashMap<String, (usize, Section)>,
}

impl Parsed<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn pairs(&self, name: &str) -> Result<&HashMap<String, (usize, String)>> {
        match self.sections.get(name) {
            Some((_, Section::Pairs(p))) => Ok(p),
            Some((l, _)) => Err(self.err(*l, format!("[{name}] must be a key/value section"))),
            None => Err(self.err(0, format!("missing section [{name}]"))),
        }
    }

    fn value<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let p = self.pairs(section)?;
        let (line, v) = p
            .get(key)
            .ok_or_else(|| self.err(0, format!("missing {key} in [{section}]")))?;
        v.parse()
            .map_err(|_| self.err(*line, format!("cannot parse {key} = {v}")))
    }

    fn matrix<T: std::str::FromStr>(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<T>> {
        let (line, shape, m) = match self.sections.get(name) {
            Some((_, Section::Matrix { line, shape, rows })) => (*line, *shape, rows),
            Some((l, _)) => return Err(self.err(*l, format!("[{name}] must be a matrix"))),
            None => return Err(self.err(0, format!("missing section [{name}]"))),
        };
        if shape != (rows, cols) {
            return Err(self.err(line, format!("[{name}] must be {rows} x {cols}")));
        }
        if cols == 0 && m.is_empty() {
            return Ok(Array2::from_shape_vec((rows, 0), Vec::new()).expect("empty"));
        }
        if m.len() != rows {
            return Err(self.err(line, format!("[{name}] declares {rows} rows, found {}", m.len())));
        }
        if let Some(r) = m.iter().position(|r| r.len() != cols) {
            return Err(self.err(line + 1 + r, format!("expected {cols} values")));
        }
        let mut vals = Vec::with_capacity(rows * cols);
        for (r, row) in m.iter().enumerate() {
            for v in row {
                vals.push(
                    v.parse()
                        .map_err(|_| self.err(line + 1 + r, format!("cannot parse {v}")))?,
                );
            }
        }
        Ok(Array2::from_shape_vec((rows, cols), vals).expect("shape checked"))
    }

    fn column<T: std::str::FromStr + Clone>(&self, name: &str, rows: usize) -> Result<Vec<T>> {
        Ok(self.matrix::<T>(name, rows, 1)?.into_raw_vec_and_offset().0)
    }

    fn points(&self, name: &str, rows: usize) -> Result<Vec<Point>> {
        let m = self.matrix::<f64>(name, rows, 2)?;
        Ok(m.rows().into_iter().map(|r| Point::new(r[0], r[1])).collect())
    }

    fn flags(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<bool>> {
        let m = self.matrix::<u8>(name, rows, cols)?;
        if m.iter().any(|&v| v > 1) {
            return Err(self.err(0, format!("[{name}] entries must be 0 or 1")));
        }
        Ok(m.mapv(|v| v == 1))
    }
}

fn split(text: &str, path: &Path) -> Result<HashMap<String, (usize, Section)>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, l)) if l == format!("{MAGIC} {FORMAT_VERSION}") => {}
        Some((_, l)) => return Err(err(1, format!("expected `{MAGIC} {FORMAT_VERSION}`, found `{l}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut sections: HashMap<String, (usize, Section)> = HashMap::new();
    let mut current: Option<String> = None;
    for (no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let (name, shape) = rest
                .split_once(']')
                .ok_or_else(|| err(no, "unterminated section header".into()))?;
            let section = if shape.trim().is_empty() {
                Section::Pairs(HashMap::new())
            } else {
                let dims: Vec<usize> = shape
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(no, format!("bad shape `{}`", shape.trim())))?;
                let [r, c] = dims[..] else {
                    return Err(err(no, format!("bad shape `{}`", shape.trim())));
                };
                Section::Matrix {
                    line: no,
                    shape: (r, c),
                    rows: Vec::new(),
                }
            };
            if sections.insert(name.to_string(), (no, section)).is_some() {
                return Err(err(no, format!("duplicate section [{name}]")));
            }
            current = Some(name.to_string());
            continue;
        }
        let name = current
            .as_ref()
            .ok_or_else(|| err(no, "data before the first section".into()))?;
        match &mut sections.get_mut(name).unwrap().1 {
            Section::Pairs(p) => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(no, "expected `key = value`".into()))?;
                p.insert(k.trim().to_string(), (no, v.trim().to_string()));
            }
            Section::Matrix { rows, .. } => {
                rows.push(line.split_whitespace().map(str::to_string).collect());
            }
        }
    }
    Ok(sections)
}

/// Parse a scenario file written by [`write_scenario`].
pub fn parse_scenario(text: &str, path: &Path) -> Result<(Scenario, DemandProfile)> {
    let p = Parsed {
        path,
        sections: split(text, path)?,
    };
    let params = SystemParams {
        bandwidth_hz: p.value("params", "bandwidth_hz")?,
        a: p.value("params", "a")?,
        t1_frac: p.value("params", "t1_frac")?,
        n_mbs: p.value("params", "n_mbs")?,
        isd_m: p.value("params", "isd_m")?,
        p_mbs_dbm: p.value("params", "p_mbs_dbm")?,
        p_sbs_dbm: p.value("params", "p_sbs_dbm")?,
        p_md_dbm: p.value("params", "p_md_dbm")?,
        noise_psd_dbm_hz: p.value("params", "noise_psd_dbm_hz")?,
        seed: p.value("params", "seed")?,
    };
    params.validate()?;
    let counts = Counts {
        sbs_per_cell: p.value("counts", "sbs_per_cell")?,
        n_hrd: p.value("counts", "n_hrd")?,
        n_csd: p.value("counts", "n_csd")?,
    };
    let ns = params.n_mbs * counts.sbs_per_cell;
    let (nh, nc) = (counts.n_hrd, counts.n_csd);
    let request_cols = match p.sections.get("request") {
        Some((_, Section::Matrix { shape, .. })) => shape.1,
        _ => 0,
    };
    let scenario = Scenario {
        mbs_pos: p.points("mbs_pos", params.n_mbs)?,
        sbs_pos: p.points("sbs_pos", ns)?,
        hrd_pos: p.points("hrd_pos", nh)?,
        csd_pos: p.points("csd_pos", nc)?,
        sbs_cell: p.column("sbs_cell", ns)?,
        backhaul_mbs: p.column("backhaul_mbs", ns)?,
        gain_mbs_sbs: p.column("gain_mbs_sbs", ns)?,
        gain_sbs_hrd: p.matrix("gain_sbs_hrd", ns, nh)?,
        gain_sbs_csd: p.matrix("gain_sbs_csd", ns, nc)?,
        params,
        counts,
    };
    let task = p.matrix::<f64>("csd_task", nc, 4)?;
    let cap = p.matrix::<f64>("sbs_capacity", ns, 2)?;
    let demand = DemandProfile {
        file_size_bytes: p.value("demand", "file_size_bytes")?,
        request: p.flags("request", nh, request_cols)?,
        cache: p.flags("cache", ns, request_cols)?,
        task_input_bytes: task.column(0).to_vec(),
        task_cycles: task.column(1).to_vec(),
        local_cycles_per_s: task.column(2).to_vec(),
        csd_weight: task.column(3).to_vec(),
        edge_cycles_per_s: cap.column(0).to_vec(),
        storage_bytes: cap.column(1).to_vec(),
        hrd_weight: p.column("hrd_weight", nh)?,
    };
    demand.validate()?;
    Ok((scenario, demand))
}

pub fn save_scenario(path: &Path, s: &Scenario, d: &DemandProfile) -> Result<()> {
    std::fs::write(path, write_scenario(s, d)).map_err(|e| Error::io(path, e))
}

pub fn load_scenario(path: &Path) -> Result<(Scenario, DemandProfile)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text, path)
}
