//! Versioned CSV tables, JSON metadata sidecars and a binary container for
//! trajectories and measures.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ergodics::{EmpiricalMeasure, MeasureProvenance};
use crate::error::{Error, Result};
use crate::occupation::OccupationMeasure;
use crate::simulator::{RecordParams, TrajectoryRecord};
use crate::rng::StreamKey;
use crate::spectral::SpectralField;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SLOWFAST";

/// Shortest round-trip decimal form; `NaN` and `inf` spelled out.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}

/// A CSV table. The first line is `# slowfast <schema> v<version>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub schema: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(schema: impl Into<String>, columns: &[&str]) -> Self {
        Self { schema: schema.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_columns(schema: impl Into<String>, columns: Vec<String>) -> Self {
        Self { schema: schema.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "{} table row has {} cells, expected {}",
                self.schema,
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn header_line(&self) -> String {
        format!("# slowfast {} v{FORMAT_VERSION}", self.schema)
    }

    /// Any cell spelled `NaN`.
    pub fn has_nan(&self) -> bool {
        self.rows.iter().flatten().any(|c| c == "NaN")
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].parse().unwrap_or(f64::NAN)).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(format!("{}\n{body}", self.header_line()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (head, body) = text.split_once('\n').ok_or_else(|| Error::invalid("empty table"))?;
        let rest = head
            .strip_prefix("# slowfast ")
            .ok_or_else(|| Error::invalid(format!("missing version header, found {head:?}")))?;
        let (schema, version) =
            rest.rsplit_once(" v").ok_or_else(|| Error::invalid(format!("malformed header {head:?}")))?;
        if version.trim() != FORMAT_VERSION.to_string() {
            return Err(Error::invalid(format!("unsupported table version {version}")));
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let columns = r.headers()?.iter().map(String::from).collect();
        let mut table = Self::with_columns(schema, columns);
        for rec in r.records() {
            table.push(rec?.iter().map(String::from).collect())?;
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    /// Comment lines naming the gnuplot `using` columns of each estimate.
    pub fn gnuplot_hints(&self, file: &str) -> String {
        let mut out = format!("# columns of {file} ({})\n", self.schema);
        for (i, c) in self.columns.iter().enumerate() {
            out.push_str(&format!("#   {}: {c}\n", i + 1));
        }
        let x = 1;
        for (i, c) in self.columns.iter().enumerate() {
            if let Some(se) = self.columns.iter().position(|s| *s == format!("{c}_se")) {
                out.push_str(&format!(
                    "plot '{file}' skip 2 using {x}:{}:{} with yerrorbars title '{c}'\n",
                    i + 1,
                    se + 1
                ));
            }
        }
        out
    }
}

/// Run metadata kept apart from the CSV body so the body is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub crate_version: String,
    pub schema: String,
    pub seed: u64,
    pub started_unix: f64,
    pub wall_seconds: f64,
    pub args: Vec<String>,
    #[serde(default)]
    pub extra: Value,
}

impl Metadata {
    pub fn new(schema: &str, seed: u64, started: std::time::SystemTime, args: Vec<String>, extra: Value) -> Self {
        let started_unix = started.duration_since(std::time::UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let wall_seconds = started.elapsed().map_or(0.0, |d| d.as_secs_f64());
        Self {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            schema: schema.into(),
            seed,
            started_unix,
            wall_seconds,
            args,
            extra,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `out.csv` → `out.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Self-describing binary file: magic, version, a JSON header and
/// little-endian `f64` arrays whose lengths the header lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: Value,
    pub arrays: Vec<Vec<f64>>,
}

impl Container {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let head = serde_json::to_vec(&json!({
            "kind": self.kind,
            "header": self.header,
            "lengths": self.arrays.iter().map(Vec::len).collect::<Vec<_>>(),
        }))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(head.len() as u64).to_le_bytes())?;
        w.write_all(&head)?;
        for a in &self.arrays {
            for x in a {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not a slowfast container"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported container version {version}")));
        }
        let mut n = [0u8; 8];
        r.read_exact(&mut n)?;
        let mut head = vec![0u8; u64::from_le_bytes(n) as usize];
        r.read_exact(&mut head)?;
        let head: Value = serde_json::from_slice(&head)?;
        let kind = head["kind"].as_str().ok_or_else(|| Error::invalid("container header lacks a kind"))?.to_string();
        let lengths: Vec<usize> = serde_json::from_value(head["lengths"].clone())?;
        let mut arrays = Vec::with_capacity(lengths.len());
        let mut buf = [0u8; 8];
        for len in lengths {
            let mut a = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                a.push(f64::from_le_bytes(buf));
            }
            arrays.push(a);
        }
        Ok(Self { kind, header: head["header"].clone(), arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(fs::File::open(path)?))
    }
}

/// Types with a binary container form.
pub trait Stored: Sized {
    const KIND: &'static str;
    fn to_container(&self) -> Container;
    fn from_container(c: Container) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != Self::KIND {
            return Err(Error::invalid(format!("container holds a {}, expected a {}", c.kind, Self::KIND)));
        }
        Self::from_container(c)
    }
}

fn flatten(fields: &[SpectralField]) -> Vec<f64> {
    fields.iter().flat_map(|f| f.coeffs().iter().copied()).collect()
}

fn unflatten(flat: &[f64], modes: usize) -> Result<Vec<SpectralField>> {
    if modes == 0 || !flat.len().is_multiple_of(modes) {
        return Err(Error::invalid("array length is not a multiple of the mode count"));
    }
    Ok(flat.chunks(modes).map(|c| SpectralField::new(c.to_vec())).collect())
}

fn take(arrays: &mut std::vec::IntoIter<Vec<f64>>) -> Result<Vec<f64>> {
    arrays.next().ok_or_else(|| Error::invalid("container has too few arrays"))
}

fn field<T: serde::de::DeserializeOwned>(header: &Value, name: &str) -> Result<T> {
    Ok(serde_json::from_value(header[name].clone())?)
}

impl Stored for TrajectoryRecord {
    const KIND: &'static str = "trajectory";

    fn to_container(&self) -> Container {
        let mut arrays = vec![self.times.clone(), flatten(&self.slow), flatten(&self.fast)];
        if let Some(c) = &self.control {
            arrays.push(flatten(c));
        }
        Container {
            kind: Self::KIND.into(),
            header: json!({
                "modes": self.modes(),
                "key": self.key,
                "params": self.params,
                "control_energy": self.control_energy,
                "controlled": self.control.is_some(),
            }),
            arrays,
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        let modes: usize = field(&c.header, "modes")?;
        let key: StreamKey = field(&c.header, "key")?;
        let params: RecordParams = field(&c.header, "params")?;
        let controlled: bool = field(&c.header, "controlled")?;
        let mut it = c.arrays.into_iter();
        let times = take(&mut it)?;
        let slow = unflatten(&take(&mut it)?, modes)?;
        let fast = take(&mut it)?;
        let fast = if fast.is_empty() { Vec::new() } else { unflatten(&fast, modes)? };
        let control = if controlled { Some(unflatten(&take(&mut it)?, modes)?) } else { None };
        let rec = TrajectoryRecord {
            times,
            slow,
            fast,
            control,
            key,
            params,
            control_energy: field(&c.header, "control_energy")?,
        };
        rec.validate()?;
        Ok(rec)
    }
}

impl Stored for EmpiricalMeasure {
    const KIND: &'static str = "empirical_measure";

    fn to_container(&self) -> Container {
        Container {
            kind: Self::KIND.into(),
            header: json!({ "modes": self.modes(), "provenance": self.provenance(), "iact": self.iact() }),
            arrays: vec![flatten(self.samples()), self.weights().to_vec()],
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        let modes: usize = field(&c.header, "modes")?;
        let provenance: MeasureProvenance = field(&c.header, "provenance")?;
        let iact: f64 = field(&c.header, "iact")?;
        let mut it = c.arrays.into_iter();
        let samples = unflatten(&take(&mut it)?, modes)?;
        let weights = take(&mut it)?;
        EmpiricalMeasure::from_parts(samples, weights, provenance, iact)
    }
}

impl Stored for OccupationMeasure {
    const KIND: &'static str = "occupation_measure";

    fn to_container(&self) -> Container {
        let mut arrays = vec![flatten(self.path())];
        arrays.push(self.control_path().map(flatten).unwrap_or_default());
        if let Some(list) = self.explicit() {
            arrays.push(list.iter().map(|a| a.0 as f64).collect());
            arrays.push(list.iter().map(|a| a.1 as f64).collect());
            arrays.push(list.iter().map(|a| a.2).collect());
        }
        Container {
            kind: Self::KIND.into(),
            header: json!({
                "modes": self.modes(),
                "stride": self.stride(),
                "window_steps": self.window_steps(),
                "controlled": self.control_path().is_some(),
                "thinned": self.is_thinned(),
            }),
            arrays,
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        let modes: usize = field(&c.header, "modes")?;
        let stride: f64 = field(&c.header, "stride")?;
        let window_steps: usize = field(&c.header, "window_steps")?;
        let controlled: bool = field(&c.header, "controlled")?;
        let thinned: bool = field(&c.header, "thinned")?;
        let mut it = c.arrays.into_iter();
        let fast = unflatten(&take(&mut it)?, modes)?;
        let control = take(&mut it)?;
        let control = if controlled { Some(unflatten(&control, modes)?) } else { None };
        let explicit = if thinned {
            let (i, j, w) = (take(&mut it)?, take(&mut it)?, take(&mut it)?);
            Some(i.iter().zip(&j).zip(&w).map(|((i, j), w)| (*i as u32, *j as u32, *w)).collect())
        } else {
            None
        };
        OccupationMeasure::from_parts(stride, window_steps, fast, control, explicit)
    }
}

fn mode_columns(prefix: &str, modes: usize) -> impl Iterator<Item = String> + '_ {
    (0..modes).map(move |k| format!("{prefix}{k}"))
}

fn cells(f: &SpectralField) -> impl Iterator<Item = String> + '_ {
    f.coeffs().iter().map(|x| num(*x))
}

pub fn trajectory_table(rec: &TrajectoryRecord) -> Result<Table> {
    let m = rec.modes();
    let mut cols = vec!["t".to_string()];
    cols.extend(mode_columns("x", m));
    if !rec.fast.is_empty() {
        cols.extend(mode_columns("y", m));
    }
    if rec.control.is_some() {
        cols.extend(mode_columns("u", m));
    }
    let mut t = Table::with_columns("trajectory", cols);
    for i in 0..rec.len() {
        let mut row = vec![num(rec.times[i])];
        row.extend(cells(&rec.slow[i]));
        if !rec.fast.is_empty() {
            row.extend(cells(&rec.fast[i]));
        }
        if let Some(c) = &rec.control {
            row.extend(cells(&c[i]));
        }
        t.push(row)?;
    }
    Ok(t)
}

pub fn measure_table(mu: &EmpiricalMeasure) -> Result<Table> {
    let mut cols = vec!["weight".to_string()];
    cols.extend(mode_columns("y", mu.modes()));
    let mut t = Table::with_columns("empirical_measure", cols);
    for (y, w) in mu.samples().iter().zip(mu.weights()) {
        let mut row = vec![num(*w)];
        row.extend(cells(y));
        t.push(row)?;
    }
    Ok(t)
}

pub fn occupation_table(occ: &OccupationMeasure) -> Result<Table> {
    let m = occ.modes();
    let mut cols = vec!["t".to_string(), "weight".to_string()];
    cols.extend(mode_columns("y", m));
    if occ.control_path().is_some() {
        cols.extend(mode_columns("u", m));
    }
    let mut t = Table::with_columns("occupation_measure", cols);
    for a in occ.atoms() {
        let mut row = vec![num(a.t), num(a.w)];
        row.extend(cells(a.y));
        if let Some(u) = a.u {
            row.extend(cells(u));
        }
        t.push(row)?;
    }
    Ok(t)
}

/// Weighted histogram of `⟨Y, e_k⟩` over `bins` equal cells spanning the samples.
pub fn histogram_table(mu: &EmpiricalMeasure, mode: usize, bins: usize) -> Result<Table> {
    if mode >= mu.modes() || bins == 0 {
        return Err(Error::invalid(format!("need mode < {} and at least one bin", mu.modes())));
    }
    let ys: Vec<f64> = mu.samples().iter().map(|s| s.coeffs()[mode]).collect();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut mass = vec![0.0; bins];
    for (y, w) in ys.iter().zip(mu.weights()) {
        mass[(((y - lo) / width) as usize).min(bins - 1)] += w;
    }
    let mut t = Table::new("histogram", &["lo", "hi", "mass", "density"]);
    for (b, m) in mass.iter().enumerate() {
        let a = lo + b as f64 * width;
        t.push(vec![num(a), num(a + width), num(*m), num(m / width)])?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::RecordKind;

    fn record(controlled: bool) -> TrajectoryRecord {
        let f = |s: f64| (0..4).map(|i| SpectralField::new(vec![s * i as f64, 1.0 / (1.0 + i as f64)])).collect();
        TrajectoryRecord {
            times: vec![0.0, 0.1, 0.2, 0.30000000000000004],
            slow: f(1.0),
            fast: f(-2.0),
            control: controlled.then(|| f(0.5)),
            key: StreamKey::new(9, 1, 2),
            params: RecordParams { kind: RecordKind::Pair, epsilon: 0.1, delta: 0.1, dt: 5e-4, record_dt: 0.1 },
            control_energy: 0.25,
        }
    }

    #[test]
    fn containers_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for controlled in [false, true] {
            let rec = record(controlled);
            let p = dir.path().join("r.bin");
            rec.save(&p).unwrap();
            assert_eq!(TrajectoryRecord::load(&p).unwrap(), rec);
            let occ = crate::occupation::build_occupation(&rec, 0.1).unwrap();
            occ.save(&p).unwrap();
            assert_eq!(OccupationMeasure::load(&p).unwrap(), occ);
            let thin = occ.thinned(1, 2, StreamKey::new(1, 0, 0));
            thin.save(&p).unwrap();
            assert_eq!(OccupationMeasure::load(&p).unwrap(), thin);
            assert!(EmpiricalMeasure::load(&p).is_err());
        }
        let prov = MeasureProvenance {
            frozen: SpectralField::zeros(2),
            burn_in: 1.0,
            horizon: 2.0,
            dt: 0.1,
            thinning: 1,
            key: StreamKey::new(0, 0, 0),
        };
        let mu = EmpiricalMeasure::new(record(false).fast, vec![1.0, 2.0, 3.0, 7.0], prov).unwrap();
        let p = dir.path().join("m.bin");
        mu.save(&p).unwrap();
        assert_eq!(EmpiricalMeasure::load(&p).unwrap(), mu);
        let h = histogram_table(&mu, 0, 3).unwrap();
        let mass: f64 = h.column("mass").unwrap().iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let mut bytes = Vec::new();
        record(true).to_container().write_to(&mut bytes).unwrap();
        assert!(Container::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(Container::read_from(&mut &bad[..]).is_err());
        bad[0] = b'X';
        assert!(Container::read_from(&mut &bad[..]).is_err());
    }

    #[test]
    fn tables_round_trip() {
        let t = trajectory_table(&record(true)).unwrap();
        assert_eq!(t.columns.len(), 7);
        let text = t.to_csv().unwrap();
        assert!(text.starts_with("# slowfast trajectory v1\nt,x0,x1,y0,y1,u0,u1\n"));
        let back = Table::from_csv(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("t").unwrap()[3], 0.30000000000000004);
        assert!(Table::from_csv("t,x\n1,2\n").is_err());
        assert!(Table::from_csv("# slowfast trajectory v9\nt\n1\n").is_err());
        let mut nan = Table::new("x", &["a", "a_se"]);
        nan.push(vec![num(f64::NAN), num(1.0)]).unwrap();
        assert!(nan.has_nan());
        assert!(nan.push(vec![num(1.0)]).is_err());
        assert!(nan.gnuplot_hints("x.csv").contains("using 1:1:2"));
        let occ = crate::occupation::build_occupation(&record(true), 0.2).unwrap();
        let ot = occupation_table(&occ).unwrap();
        assert_eq!(ot.rows.len(), occ.len());
        let mass: f64 = ot.column("weight").unwrap().iter().sum();
        assert!((mass - occ.mass()).abs() < 1e-15);
    }
}
