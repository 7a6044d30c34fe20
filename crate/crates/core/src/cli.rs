//! Experiment plumbing behind the `fcaccel` binary: the weight container
//! format, seeded generators, run configuration and the `run`, `tables`,
//! `sweep` and `verify` commands.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapath::{reference_serial_fixed, run_inference, PeArray};
use crate::fxnum::{FixedWord, QFormat};
use crate::layer::{plan_schedule, tile_weights, validate_config, LayerConfig, LayerPreset, WeightMatrix};
use crate::memsys::{HbmParams, MemorySystem};
use crate::timing::{peak_gops, simulate_analytic, simulate_detailed, Block, ClockSpec, PowerModel, SimReport};

pub const CONTAINER_MAGIC: &[u8; 4] = b"FCW1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"FCW1\"")]
    BadMagic([u8; 4]),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload is {found} bytes, header promises {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `FCW1`, u32 LE header length, `key=value` header lines, then
/// `rows*cols` i16 LE words in row-major order.
pub fn write_container<W: Write>(out: &mut W, m: &WeightMatrix) -> io::Result<()> {
    let header = format!(
        "rows={}\ncols={}\ntotal_bits={}\nfrac_bits={}\nlayout=row-major\nbyte_order=little\n",
        m.rows(),
        m.cols(),
        m.format().total_bits(),
        m.format().frac_bits()
    );
    out.write_all(CONTAINER_MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    let mut payload = Vec::with_capacity(m.raw().len() * 2);
    for w in m.raw() {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    out.write_all(&payload)
}

pub fn read_container<R: Read>(input: &mut R) -> Result<WeightMatrix, ContainerError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| ContainerError::Header("not UTF-8".into()))?;

    let (mut rows, mut cols, mut total, mut frac) = (None, None, None, None);
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| ContainerError::Header(format!("line '{line}'")))?;
        let num = || v.trim().parse::<usize>().map_err(|_| ContainerError::Header(format!("{k}={v}")));
        match k.trim() {
            "rows" => rows = Some(num()?),
            "cols" => cols = Some(num()?),
            "total_bits" => total = Some(num()?),
            "frac_bits" => frac = Some(num()?),
            "layout" if v.trim() != "row-major" => return Err(ContainerError::Header(format!("layout {v}"))),
            "byte_order" if v.trim() != "little" => return Err(ContainerError::Header(format!("byte order {v}"))),
            _ => {}
        }
    }
    let missing = |k: &str| ContainerError::Header(format!("missing {k}"));
    let (rows, cols) = (rows.ok_or_else(|| missing("rows"))?, cols.ok_or_else(|| missing("cols"))?);
    let fmt = QFormat::new(
        total.ok_or_else(|| missing("total_bits"))? as u32,
        frac.ok_or_else(|| missing("frac_bits"))? as u32,
    )
    .map_err(|e| ContainerError::Header(e.to_string()))?;

    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let expected = rows * cols * 2;
    if payload.len() != expected {
        return Err(ContainerError::PayloadLength { expected, found: payload.len() });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for pair in payload.chunks_exact(2) {
        let raw = i16::from_le_bytes([pair[0], pair[1]]);
        FixedWord::from_raw(raw, fmt).map_err(|e| ContainerError::Header(e.to_string()))?;
        data.push(raw);
    }
    WeightMatrix::new(rows, cols, fmt, data).map_err(|e| ContainerError::Header(e.to_string()))
}

pub fn save_container(path: &Path, m: &WeightMatrix) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, m)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load_container(path: &Path) -> anyhow::Result<WeightMatrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_container(&mut bytes.as_slice()).with_context(|| format!("parsing {}", path.display()))
}

/// Nonzero raw words drawn from SplitMix64 seeded with `seed`: each draw
/// `u` maps to the `(u mod K)`-th nonzero value of the format's range, with
/// `K` the number of nonzero values.
pub fn gen_weights(seed: u64, rows: usize, cols: usize, fmt: QFormat) -> anyhow::Result<WeightMatrix> {
    ensure!(rows > 0 && cols > 0, "generated matrices need positive dimensions (got {rows}x{cols})");
    let mut rng = SplitMix64::seed_from_u64(seed);
    let span = (fmt.raw_max() - fmt.raw_min()) as u64;
    let data = (0..rows * cols)
        .map(|_| {
            let v = (rng.next_u64() % span) as i64 + fmt.raw_min();
            (if v >= 0 { v + 1 } else { v }) as i16
        })
        .collect();
    Ok(WeightMatrix::new(rows, cols, fmt, data)?)
}

fn words(m: &WeightMatrix) -> Vec<FixedWord> {
    (0..m.cols()).map(|c| m.get(0, c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Analytic,
    Detailed,
    Functional,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

/// Everything a `run` needs; every field is optional in the TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    /// `[in_features, out_features]`.
    pub custom: Option<[usize; 2]>,
    pub tile: Option<usize>,
    pub pe_count: Option<usize>,
    pub pipelined: Option<bool>,
    pub rd_clk_hz: Option<f64>,
    pub rd_period_ns: Option<f64>,
    pub wr_clk_hz: Option<f64>,
    pub cycles_per_slot: Option<u32>,
    pub frac_bits: Option<u32>,
    pub mode: Mode,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub inputs: Option<PathBuf>,
    pub bias: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Layer, clocks and HBM read parameters. Bias is zero here;
    /// functional runs fill it in.
    pub fn resolve(&self) -> anyhow::Result<(LayerConfig, ClockSpec, HbmParams)> {
        let mut cfg = match (&self.preset, self.custom) {
            (Some(_), Some(_)) => bail!("give either a preset or custom dimensions, not both"),
            (_, Some([m, n])) => LayerConfig::new(m, n, self.tile.unwrap_or(8)),
            (p, None) => {
                let preset: LayerPreset = p.as_deref().unwrap_or("fc8-alex").parse()?;
                let mut cfg = LayerConfig::from_preset(preset);
                if let Some(t) = self.tile {
                    cfg.tile = t;
                }
                cfg
            }
        };
        if let Some(f) = self.frac_bits {
            cfg.fmt = QFormat::new(16, f)?;
            cfg.bias = vec![FixedWord::zero(cfg.fmt); cfg.out_features];
        }
        if let Some(p) = self.pipelined {
            cfg = cfg.with_pipelined(p);
        }
        if let Some(p) = self.pe_count {
            cfg.pe_count = p;
        }
        cfg.cycles_per_slot = self.cycles_per_slot;

        let wr = self.wr_clk_hz.unwrap_or(crate::memsys::HBM_WR_CLK_HZ);
        let clocks = match (self.rd_clk_hz, self.rd_period_ns) {
            (Some(f), Some(p)) => ClockSpec::new(f, wr, p * 1e-9)?,
            (Some(f), None) => ClockSpec::exact(f, wr)?,
            (None, Some(p)) => ClockSpec::new(1.0 / (p * 1e-9), wr, p * 1e-9)?,
            (None, None) => ClockSpec { wr_clk_hz: wr, ..ClockSpec::for_layer(&cfg)? },
        };
        cfg.clk_hz = clocks.rd_clk_hz;
        let diags = validate_config(&cfg);
        ensure!(diags.is_empty(), "invalid configuration: {}", diags.join("; "));
        let hbm = HbmParams { wr_clk_hz: wr, ..HbmParams::for_tile(cfg.tile) };
        hbm.validate(cfg.tile)?;
        Ok((cfg, clocks, hbm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalOutcome {
    pub oracle_match: bool,
    pub mismatches: usize,
    /// Output words when the detailed memory path fed the PE array.
    pub memory_path_match: Option<bool>,
    pub read_once: Option<bool>,
    pub read_once_problems: Vec<String>,
    pub outputs: Vec<i16>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub ok: bool,
    pub analytic: Option<SimReport>,
    pub detailed: Option<SimReport>,
    pub functional: Option<FunctionalOutcome>,
}

fn layer_data(cfg: &LayerConfig, rc: &RunConfig) -> anyhow::Result<(WeightMatrix, Vec<FixedWord>, Vec<FixedWord>)> {
    let (m, n) = (cfg.in_features, cfg.out_features);
    let weights = match &rc.weights {
        Some(p) => load_container(p)?,
        None => gen_weights(rc.seed, n, m, cfg.fmt)?,
    };
    ensure!(
        weights.rows() == n && weights.cols() == m && weights.format() == cfg.fmt,
        "weight file is {}x{} {}, layer needs {n}x{m} {}",
        weights.rows(),
        weights.cols(),
        weights.format(),
        cfg.fmt
    );
    let vector = |path: &Option<PathBuf>, len: usize, seed: u64, what: &str| -> anyhow::Result<Vec<FixedWord>> {
        let v = match path {
            Some(p) => load_container(p)?,
            None => gen_weights(seed, 1, len, cfg.fmt)?,
        };
        ensure!(v.rows() == 1 && v.cols() == len && v.format() == cfg.fmt, "{what} file must be 1x{len} {}", cfg.fmt);
        Ok(words(&v))
    };
    let x = vector(&rc.inputs, m, rc.seed.wrapping_add(1), "input")?;
    let bias = vector(&rc.bias, n, rc.seed.wrapping_add(2), "bias")?;
    Ok((weights, x, bias))
}

/// Execute the requested modes. `ok` is false when any check fails.
pub fn cmd_run(rc: &RunConfig) -> anyhow::Result<RunOutcome> {
    let (mut cfg, clocks, hbm) = rc.resolve()?;
    let sched = plan_schedule(&cfg)?;
    let power = PowerModel::synthesized(cfg.pipelined);
    let mut out = RunOutcome { ok: true, analytic: None, detailed: None, functional: None };

    if matches!(rc.mode, Mode::Analytic | Mode::All) {
        let r = simulate_analytic(&cfg, &sched, &clocks).with_energy(&power);
        r.check_invariants().map_err(anyhow::Error::msg)?;
        out.analytic = Some(r);
    }
    if rc.mode == Mode::Detailed {
        let mut mem = MemorySystem::timing_only_with(&cfg, hbm)?;
        let r = simulate_detailed(&cfg, &sched, &clocks, &mut mem, None)?.with_energy(&power);
        out.ok &= r.feasible() == Some(true);
        out.detailed = Some(r);
    }
    if matches!(rc.mode, Mode::Functional | Mode::All) {
        let (weights, x, bias) = layer_data(&cfg, rc)?;
        cfg.bias = bias;
        let grid = tile_weights(&weights, &cfg)?;
        let tiled = run_inference(&cfg, &grid, &x)?.outputs;
        let oracle = reference_serial_fixed(&cfg, &weights, &x)?;
        let mismatches = tiled.iter().zip(&oracle).filter(|(a, b)| a != b).count();
        let mut f = FunctionalOutcome {
            oracle_match: mismatches == 0,
            mismatches,
            memory_path_match: None,
            read_once: None,
            read_once_problems: Vec::new(),
            outputs: tiled.iter().map(|w| w.raw()).collect(),
        };
        out.ok &= f.oracle_match;
        if rc.mode == Mode::All {
            let mut mem = MemorySystem::load_with(&cfg, hbm, &grid, &x)?;
            let mut array = PeArray::new(&cfg);
            let r = simulate_detailed(&cfg, &sched, &clocks, &mut mem, Some(&mut array))?.with_energy(&power);
            let via_memory = array.into_outputs();
            f.memory_path_match = Some(via_memory == oracle);
            let check = mem.trace.verify_read_once(&mem.map);
            f.read_once = Some(check.is_ok());
            f.read_once_problems = check.err().unwrap_or_default();
            out.ok &= r.feasible() == Some(true) && via_memory == oracle && f.read_once == Some(true);
            out.detailed = Some(r);
        }
        out.functional = Some(f);
    }
    Ok(out)
}

/// Flat CSV view of the timing reports in a run.
pub fn run_csv(outcome: &RunOutcome) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode",
        "in_features",
        "out_features",
        "tile",
        "pe_count",
        "pipelined",
        "passes",
        "slots_per_pass",
        "cycles_per_slot",
        "total_cycles",
        "rd_period_s",
        "latency_s",
        "effective_gops",
        "energy_j",
        "feasible",
    ])?;
    for r in outcome.analytic.iter().chain(&outcome.detailed) {
        w.write_record([
            r.mode.clone(),
            r.in_features.to_string(),
            r.out_features.to_string(),
            r.tile.to_string(),
            r.pe_count.to_string(),
            r.pipelined.to_string(),
            r.passes.to_string(),
            r.slots_per_pass.to_string(),
            r.cycles_per_slot.to_string(),
            r.total_cycles.to_string(),
            r.rd_period_s.to_string(),
            r.latency_s.to_string(),
            r.effective_gops.to_string(),
            r.energy.as_ref().map(|e| e.energy_j.to_string()).unwrap_or_default(),
            r.feasible().map(|f| f.to_string()).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub table: &'static str,
    pub entry: String,
    pub column: &'static str,
    pub value: f64,
    pub unit: &'static str,
    /// `computed` or `published`.
    pub source: &'static str,
    /// Published figure for computed rows, when one exists.
    pub published: Option<f64>,
}

/// Latency, block-throughput and up-scaled-latency tables, computed rows
/// next to published comparison figures.
pub fn cmd_tables() -> anyhow::Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    let mut lit = |table, entry: &str, column, value, unit| {
        rows.push(TableRow {
            table,
            entry: entry.to_string(),
            column,
            value,
            unit,
            source: "published",
            published: None,
        })
    };
    lit("latency-fc8", "GPU Titan X, batch 1, dense", "alexnet-fc8", 80.5, "us");
    lit("latency-fc8", "GPU Titan X, batch 1, dense", "vgg16-fc8", 80.5, "us");
    lit("latency-fc8", "GPU Titan X, batch 64, dense", "alexnet-fc8", 5.9, "us");
    lit("latency-fc8", "GPU Titan X, batch 64, dense", "vgg16-fc8", 5.9, "us");
    lit("latency-fc8", "EIE, compressed, 800 MHz", "alexnet-fc8", 9.9, "us");
    lit("latency-fc8", "EIE, compressed, 800 MHz", "vgg16-fc8", 8.4, "us");

    let computed = |table, entry: String, column, value, unit, published| TableRow {
        table,
        entry,
        column,
        value,
        unit,
        source: "computed",
        published,
    };
    for (pipelined, label, published) in [
        (false, "this work, non-pipelined 8x8 PE, 100 MHz", 56.32),
        (true, "this work, pipelined 8x8 PE, 662 MHz", 8.5),
    ] {
        for (preset, column) in [(LayerPreset::Fc8Alex, "alexnet-fc8"), (LayerPreset::Fc8Vgg, "vgg16-fc8")] {
            let cfg = LayerConfig::from_preset(preset).with_pipelined(pipelined);
            let r = simulate_analytic(&cfg, &plan_schedule(&cfg)?, &ClockSpec::for_layer(&cfg)?);
            rows.push(computed("latency-fc8", label.to_string(), column, r.latency_us(), "us", Some(published)));
        }
    }

    let fc8 = LayerConfig::from_preset(LayerPreset::Fc8Alex);
    for (block, pipelined, label, published) in [
        (Block::MvMult, false, "MV-mult, non-pipelined", 1536.0),
        (Block::MvMult, true, "MV-mult, pipelined", 10172.0),
        (Block::VAccum, false, "V-accum", 204.8),
        (Block::AddBiasRelu, false, "Add-bias, ReLU", 102.4),
    ] {
        let g = peak_gops(block, &fc8, &ClockSpec::reference(pipelined));
        rows.push(computed("block-throughput", label.to_string(), "gops", g, "GOPS", Some(published)));
    }

    for (preset, column, label, published) in [
        (LayerPreset::Fc6Alex, "alexnet", "this work FC6", 12.0),
        (LayerPreset::Fc6Vgg, "vgg16", "this work FC6", 33.2),
        (LayerPreset::Fc7, "alexnet", "this work FC7", 5.41),
        (LayerPreset::Fc7, "vgg16", "this work FC7", 5.41),
    ] {
        let cfg = LayerConfig::from_preset(preset);
        let r = simulate_analytic(&cfg, &plan_schedule(&cfg)?, &ClockSpec::for_layer(&cfg)?);
        rows.push(computed("latency-fc6-fc7", label.to_string(), column, r.latency_us(), "us", Some(published)));
    }
    let mut lit = |table, entry: &str, column, value, unit| {
        rows.push(TableRow {
            table,
            entry: entry.to_string(),
            column,
            value,
            unit,
            source: "published",
            published: None,
        })
    };
    lit("latency-fc6-fc7", "EIE FC6", "alexnet", 30.3, "us");
    lit("latency-fc6-fc7", "EIE FC6", "vgg16", 34.4, "us");
    lit("latency-fc6-fc7", "EIE FC7", "alexnet", 12.2, "us");
    lit("latency-fc6-fc7", "EIE FC7", "vgg16", 8.7, "us");

    // end-to-end GOPS figures, echoed only: their op-count convention is unknown
    for (entry, a, v) in [
        ("EIE ASIC 45nm, compressed, 800 MHz", 102.0, 102.0),
        ("TETRIS ASIC 45nm, 500 MHz", 627.0, 627.0),
        ("VC707 FPGA 28nm, 150 MHz", 28.8, 131.2),
        ("ZC706 FPGA 28nm, 150 MHz", 16.5, 71.2),
        ("this work as published, non-pipelined, 100 MHz, 17 W", 108.0, 108.0),
        ("this work as published, pipelined, 662 MHz, 90.1 W", 1048.0, 1048.0),
    ] {
        lit("throughput-comparison", entry, "alexnet-fc8", a, "GOPS");
        lit("throughput-comparison", entry, "vgg16-fc8", v, "GOPS");
    }
    lit("throughput-comparison", "this work as published, headline figure, 100 MHz", "fc8", 48.4, "GOPS");
    for pipelined in [false, true] {
        let cfg = LayerConfig::from_preset(LayerPreset::Fc8Alex).with_pipelined(pipelined);
        let r = simulate_analytic(&cfg, &plan_schedule(&cfg)?, &ClockSpec::for_layer(&cfg)?)
            .with_energy(&PowerModel::synthesized(pipelined));
        let label = if pipelined { "pipelined, 662 MHz" } else { "non-pipelined, 100 MHz" };
        rows.push(computed(
            "throughput-comparison",
            format!("this work effective (2MN/latency), {label}"),
            "fc8",
            r.effective_gops,
            "GOPS",
            None,
        ));
        if let Some(gpw) = r.energy.as_ref().and_then(|e| e.gops_per_watt) {
            rows.push(computed(
                "throughput-comparison",
                format!("this work effective GOPS/W, {label}"),
                "fc8",
                gpw,
                "GOPS/W",
                None,
            ));
        }
    }
    Ok(rows)
}

pub fn tables_csv(rows: &[TableRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn tables_text(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let mut current = "";
    for r in rows {
        if r.table != current {
            current = r.table;
            out.push_str(&format!("\n== {current} ==\n"));
        }
        let published = r.published.map(|p| format!("  (published {p})")).unwrap_or_default();
        out.push_str(&format!(
            "{:<58} {:<12} {:>12.4} {:<7} {:<9}{}\n",
            r.entry, r.column, r.value, r.unit, r.source, published
        ));
    }
    out
}

/// Axes of a sweep. The layer comes from `preset` or `custom`; every
/// combination of the listed values is one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub preset: Option<String>,
    pub custom: Option<[usize; 2]>,
    pub tiles: Vec<usize>,
    pub pe_counts: Vec<usize>,
    pub pipelined: Vec<bool>,
    /// `None`: the reference clock for each pipelining choice.
    pub rd_clk_hz: Option<Vec<f64>>,
    pub detailed: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            preset: None,
            custom: None,
            tiles: vec![8],
            pe_counts: vec![128],
            pipelined: vec![false, true],
            rd_clk_hz: None,
            detailed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub tile: usize,
    pub pe_count: usize,
    pub pipelined: bool,
    pub rd_clk_hz: Option<f64>,
    pub status: String,
    pub passes: Option<usize>,
    pub slots_per_pass: Option<usize>,
    pub cycles_per_slot: Option<u32>,
    pub total_cycles: Option<u64>,
    pub latency_s: Option<f64>,
    pub mv_mult_peak_gops: Option<f64>,
    pub effective_gops: Option<f64>,
    pub power_w: Option<f64>,
    pub energy_j: Option<f64>,
    pub gops_per_watt: Option<f64>,
    pub feasible: Option<bool>,
}

pub fn cmd_sweep(grid: &SweepGrid) -> Vec<SweepRow> {
    let clocks: Vec<Option<f64>> = match &grid.rd_clk_hz {
        None => vec![None],
        Some(v) => v.iter().copied().map(Some).collect(),
    };
    let mut points = Vec::new();
    for &tile in &grid.tiles {
        for &pe in &grid.pe_counts {
            for &pipelined in &grid.pipelined {
                for &clk in &clocks {
                    points.push((tile, pe, pipelined, clk));
                }
            }
        }
    }
    points
        .into_par_iter()
        .enumerate()
        .map(|(index, (tile, pe_count, pipelined, clk))| {
            let mut row = SweepRow {
                index,
                tile,
                pe_count,
                pipelined,
                rd_clk_hz: clk,
                status: "ok".into(),
                passes: None,
                slots_per_pass: None,
                cycles_per_slot: None,
                total_cycles: None,
                latency_s: None,
                mv_mult_peak_gops: None,
                effective_gops: None,
                power_w: None,
                energy_j: None,
                gops_per_watt: None,
                feasible: None,
            };
            if let Err(e) = sweep_point(grid, &mut row) {
                row.status = format!("invalid: {e:#}");
            }
            row
        })
        .collect()
}

fn sweep_point(grid: &SweepGrid, row: &mut SweepRow) -> anyhow::Result<()> {
    let rc = RunConfig {
        preset: grid.preset.clone(),
        custom: grid.custom,
        tile: Some(row.tile),
        pe_count: Some(row.pe_count),
        pipelined: Some(row.pipelined),
        rd_clk_hz: row.rd_clk_hz,
        ..RunConfig::default()
    };
    let (cfg, clocks, hbm) = rc.resolve()?;
    let sched = plan_schedule(&cfg)?;
    let r = simulate_analytic(&cfg, &sched, &clocks).with_energy(&PowerModel::synthesized(cfg.pipelined));
    row.rd_clk_hz = Some(clocks.rd_clk_hz);
    row.passes = Some(r.passes);
    row.slots_per_pass = Some(r.slots_per_pass);
    row.cycles_per_slot = Some(r.cycles_per_slot);
    row.total_cycles = Some(r.total_cycles);
    row.latency_s = Some(r.latency_s);
    row.mv_mult_peak_gops = r.peak_gops_per_block.get(Block::MvMult.name()).copied();
    row.effective_gops = Some(r.effective_gops);
    if let Some(e) = &r.energy {
        row.power_w = Some(e.power_w);
        row.energy_j = Some(e.energy_j);
        row.gops_per_watt = e.gops_per_watt;
    }
    if grid.detailed {
        let mut mem = MemorySystem::timing_only_with(&cfg, hbm)?;
        let d = simulate_detailed(&cfg, &sched, &clocks, &mut mem, None)?;
        row.feasible = d.feasible();
    }
    Ok(())
}

/// CSV with a header row even when there are no rows.
pub fn sweep_csv(rows: &[SweepRow]) -> anyhow::Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record([
        "index",
        "tile",
        "pe_count",
        "pipelined",
        "rd_clk_hz",
        "status",
        "passes",
        "slots_per_pass",
        "cycles_per_slot",
        "total_cycles",
        "latency_s",
        "mv_mult_peak_gops",
        "effective_gops",
        "power_w",
        "energy_j",
        "gops_per_watt",
        "feasible",
    ])?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub cases: usize,
    pub failures: Vec<String>,
}

/// One seeded random layer: dimensions in `1..=64`, tile 8 or 16, a PE
/// count from {1, 2, 3, 128} and weights scaled down by a random shift so
/// both saturating and non-saturating regimes occur.
pub fn random_layer(seed: u64) -> (LayerConfig, WeightMatrix, Vec<FixedWord>) {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut pick = |n: u64| (rng.next_u64() % n) as usize;
    let m = 1 + pick(64);
    let n = 1 + pick(64);
    let tile = if pick(2) == 0 { 8 } else { 16 };
    let pe = [1, 2, 3, 128][pick(4)];
    let shift = pick(12) as u32;
    let fmt = QFormat::Q16_10;
    let data_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let scale = |v: i16| v >> shift;
    let w = gen_weights(data_seed, n, m, fmt).expect("positive dims");
    let w = WeightMatrix::new(n, m, fmt, w.raw().iter().map(|&v| scale(v)).collect()).expect("same shape");
    let x = gen_weights(data_seed ^ 1, 1, m, fmt).expect("positive dims");
    let x = x.raw().iter().map(|&v| FixedWord::from_raw(scale(v), fmt).expect("16-bit")).collect();
    let b = gen_weights(data_seed ^ 2, 1, n, fmt).expect("positive dims");
    let bias = b.raw().iter().map(|&v| FixedWord::from_raw(scale(v), fmt).expect("16-bit")).collect();
    let cfg = LayerConfig::new(m, n, tile).with_pe_count(pe).with_bias(bias);
    (cfg, w, x)
}

/// Tiled inference against the serial oracle on `cases` random layers,
/// plus optionally the full 4096 -> 1000 layer with generated weights.
pub fn cmd_verify(cases: usize, seed: u64, full_fc8: bool) -> VerifyOutcome {
    let mut failures: Vec<String> = (0..cases)
        .into_par_iter()
        .filter_map(|i| {
            let (cfg, w, x) = random_layer(seed.wrapping_add(i as u64));
            check_layer(&cfg, &w, &x)
                .err()
                .map(|e| format!("case {i} ({}x{} T={}): {e}", cfg.out_features, cfg.in_features, cfg.tile))
        })
        .collect();
    if full_fc8 {
        let rc = RunConfig { mode: Mode::Functional, seed, ..RunConfig::default() };
        match cmd_run(&rc) {
            Ok(o) if o.ok => {}
            Ok(o) => failures.push(format!(
                "fc8: {} outputs differ from the serial oracle",
                o.functional.map(|f| f.mismatches).unwrap_or(0)
            )),
            Err(e) => failures.push(format!("fc8: {e:#}")),
        }
    }
    VerifyOutcome { cases: cases + full_fc8 as usize, failures }
}

fn check_layer(cfg: &LayerConfig, w: &WeightMatrix, x: &[FixedWord]) -> anyhow::Result<()> {
    let grid = tile_weights(w, cfg)?;
    let tiled = run_inference(cfg, &grid, x)?.outputs;
    let serial = reference_serial_fixed(cfg, w, x)?;
    let bad = tiled.iter().zip(&serial).filter(|(a, b)| a != b).count();
    ensure!(bad == 0, "{bad} outputs differ");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_layout() {
        let m = WeightMatrix::new(2, 3, QFormat::Q16_10, vec![1, -2, 3, -32768, 32767, 0]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"FCW1");
        let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&buf[8..8 + hlen]).unwrap();
        assert_eq!(header, "rows=2\ncols=3\ntotal_bits=16\nfrac_bits=10\nlayout=row-major\nbyte_order=little\n");
        assert_eq!(&buf[8 + hlen..8 + hlen + 4], &[1, 0, 0xfe, 0xff]);
        assert_eq!(buf.len(), 8 + hlen + 12);
        assert_eq!(read_container(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn container_rejects_bad_input() {
        let m = WeightMatrix::zeros(2, 2, QFormat::Q16_10);
        let mut buf = Vec::new();
        write_container(&mut buf, &m).unwrap();
        let mut short = buf.clone();
        short.pop();
        assert!(matches!(read_container(&mut short.as_slice()), Err(ContainerError::PayloadLength { .. })));
        let mut magic = buf.clone();
        magic[3] = b'2';
        assert!(matches!(read_container(&mut magic.as_slice()), Err(ContainerError::BadMagic(_))));
        let bad = b"FCW1\x08\x00\x00\x00rows=1\n\x00\x00".to_vec();
        assert!(matches!(read_container(&mut bad.as_slice()), Err(ContainerError::Header(_))));
    }

    #[test]
    fn generator_is_deterministic_and_nonzero() {
        let a = gen_weights(7, 16, 16, QFormat::Q16_10).unwrap();
        assert_eq!(a, gen_weights(7, 16, 16, QFormat::Q16_10).unwrap());
        assert!(a.raw().iter().all(|&v| v != 0));
        assert_ne!(a, gen_weights(8, 16, 16, QFormat::Q16_10).unwrap());
        assert!(gen_weights(0, 0, 2, QFormat::Q16_10).is_err());
    }

    #[test]
    fn generator_golden_bytes() {
        let m = gen_weights(0, 2, 2, QFormat::Q16_10).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &m).unwrap();
        assert_eq!(m.raw(), &[21288, -27503, -22219, 9582]);
        assert_eq!(&buf[buf.len() - 8..], &[0x28, 0x53, 0x91, 0x94, 0x35, 0xa9, 0x6e, 0x25]);
    }

    #[test]
    fn run_config_resolution() {
        let (cfg, clocks, _) = RunConfig { pipelined: Some(true), ..Default::default() }.resolve().unwrap();
        assert_eq!((cfg.in_features, cfg.out_features, cfg.tile), (4096, 1000, 8));
        assert_eq!(clocks.rd_period_s, 1.51e-9);
        let (cfg, _, hbm) = RunConfig { preset: Some("fc6-vgg".into()), ..Default::default() }.resolve().unwrap();
        assert!(cfg.pipelined);
        assert_eq!(hbm.dq_bits, 1024);
        assert!(RunConfig { tile: Some(12), ..Default::default() }.resolve().is_err());
        assert!(RunConfig { preset: Some("fc8-alex".into()), custom: Some([8, 8]), ..Default::default() }
            .resolve()
            .is_err());
        let toml = "preset = \"fc7\"\nmode = \"detailed\"\npe_count = 64\n";
        let rc = RunConfig::from_toml(toml).unwrap();
        assert_eq!(rc.mode, Mode::Detailed);
        assert_eq!(rc.resolve().unwrap().0.pe_count, 64);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn empty_sweep_has_header_only() {
        let grid = SweepGrid { pe_counts: vec![], ..Default::default() };
        let csv = sweep_csv(&cmd_sweep(&grid)).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("index,tile,pe_count"));
    }

    #[test]
    fn sweep_reports_invalid_points_and_runs_the_rest() {
        let grid = SweepGrid { tiles: vec![8, 12], pipelined: vec![false], ..Default::default() };
        let rows = cmd_sweep(&grid);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].status, "ok");
        assert_eq!(rows[0].total_cycles, Some(5632));
        assert!(rows[1].status.starts_with("invalid: "), "{}", rows[1].status);
        assert_eq!(rows[1].total_cycles, None);
    }

    #[test]
    fn verify_small_suite() {
        let v = cmd_verify(20, 3, false);
        assert_eq!(v.cases, 20);
        assert!(v.failures.is_empty(), "{:?}", v.failures);
    }
}
