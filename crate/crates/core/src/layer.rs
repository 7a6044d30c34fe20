//! Layer configuration, weight tiling and the column-row-column schedule.
//!
//! The `N x M` weight matrix is zero-padded to a whole number of `T x T`
//! tiles, with the row count further padded so every pass keeps all `P`
//! processing elements busy. The schedule walks tile columns in sequence;
//! within one time slot each PE owns a distinct tile row of the same column.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxnum::{FixedWord, QFormat};

pub const DEFAULT_PE_COUNT: usize = 128;
pub const NON_PIPELINED_CLK_HZ: f64 = 100e6;
pub const PIPELINED_CLK_HZ: f64 = 662e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("invalid layer configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: String, found: String },
    #[error("unknown layer preset '{0}' (expected fc8-alex, fc8-vgg, fc7, fc6-alex or fc6-vgg)")]
    UnknownPreset(String),
}

/// Dense row-major matrix of raw words sharing one format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    fmt: QFormat,
    data: Vec<i16>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, fmt: QFormat, data: Vec<i16>) -> Result<Self, LayerError> {
        if data.len() != rows * cols {
            return Err(LayerError::DimensionMismatch {
                what: "weight payload length",
                expected: (rows * cols).to_string(),
                found: data.len().to_string(),
            });
        }
        Ok(WeightMatrix { rows, cols, fmt, data })
    }

    pub fn zeros(rows: usize, cols: usize, fmt: QFormat) -> Self {
        WeightMatrix { rows, cols, fmt, data: vec![0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, fmt: QFormat, mut f: impl FnMut(usize, usize) -> i16) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        WeightMatrix { rows, cols, fmt, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> QFormat {
        self.fmt
    }

    pub fn raw(&self) -> &[i16] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> FixedWord {
        FixedWord::from_raw_unchecked(self.data[r * self.cols + c], self.fmt)
    }

    pub fn row(&self, r: usize) -> &[i16] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// The four concrete layers the accelerator was sized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPreset {
    /// 4096 -> 1000, 8x8 tiles.
    Fc8Alex,
    /// Same shape as `Fc8Alex`.
    Fc8Vgg,
    /// 4096 -> 4096, 16x16 tiles, two passes.
    Fc7,
    /// 9216 -> 4096, 16x16 tiles, two passes.
    Fc6Alex,
    /// 25088 -> 4096, 16x16 tiles, two passes.
    Fc6Vgg,
}

impl LayerPreset {
    pub const ALL: [LayerPreset; 5] =
        [LayerPreset::Fc8Alex, LayerPreset::Fc8Vgg, LayerPreset::Fc7, LayerPreset::Fc6Alex, LayerPreset::Fc6Vgg];

    pub fn name(self) -> &'static str {
        match self {
            LayerPreset::Fc8Alex => "fc8-alex",
            LayerPreset::Fc8Vgg => "fc8-vgg",
            LayerPreset::Fc7 => "fc7",
            LayerPreset::Fc6Alex => "fc6-alex",
            LayerPreset::Fc6Vgg => "fc6-vgg",
        }
    }

    /// `(in_features, out_features)`.
    pub fn shape(self) -> (usize, usize) {
        match self {
            LayerPreset::Fc8Alex | LayerPreset::Fc8Vgg => (4096, 1000),
            LayerPreset::Fc7 => (4096, 4096),
            LayerPreset::Fc6Alex => (9216, 4096),
            LayerPreset::Fc6Vgg => (25088, 4096),
        }
    }

    pub fn default_tile(self) -> usize {
        match self {
            LayerPreset::Fc8Alex | LayerPreset::Fc8Vgg => 8,
            _ => 16,
        }
    }

    /// The up-scaled 16x16 configurations are only evaluated pipelined.
    pub fn default_pipelined(self) -> bool {
        self.default_tile() == 16
    }
}

impl FromStr for LayerPreset {
    type Err = LayerError;
    fn from_str(s: &str) -> Result<Self, LayerError> {
        LayerPreset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| LayerError::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for LayerPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub in_features: usize,
    pub out_features: usize,
    pub tile: usize,
    pub pe_count: usize,
    pub fmt: QFormat,
    pub pipelined: bool,
    pub clk_hz: f64,
    pub bias: Vec<FixedWord>,
    /// Overrides the 11/7 cycle slot budget for design-space sweeps.
    pub cycles_per_slot: Option<u32>,
}

impl LayerConfig {
    /// Non-pipelined layer at 100 MHz with 128 PEs and zero bias.
    pub fn new(in_features: usize, out_features: usize, tile: usize) -> Self {
        let fmt = QFormat::Q16_10;
        LayerConfig {
            in_features,
            out_features,
            tile,
            pe_count: DEFAULT_PE_COUNT,
            fmt,
            pipelined: false,
            clk_hz: NON_PIPELINED_CLK_HZ,
            bias: vec![FixedWord::zero(fmt); out_features],
            cycles_per_slot: None,
        }
    }

    pub fn from_preset(preset: LayerPreset) -> Self {
        let (m, n) = preset.shape();
        LayerConfig::new(m, n, preset.default_tile()).with_pipelined(preset.default_pipelined())
    }

    /// Switch pipelining and the matching default clock.
    pub fn with_pipelined(mut self, pipelined: bool) -> Self {
        self.pipelined = pipelined;
        self.clk_hz = if pipelined { PIPELINED_CLK_HZ } else { NON_PIPELINED_CLK_HZ };
        self
    }

    pub fn with_pe_count(mut self, pe_count: usize) -> Self {
        self.pe_count = pe_count;
        self
    }

    pub fn with_bias(mut self, bias: Vec<FixedWord>) -> Self {
        self.bias = bias;
        self
    }

    pub fn padded_cols(&self) -> usize {
        self.in_features.div_ceil(self.tile) * self.tile
    }

    pub fn padded_rows(&self) -> usize {
        let band = self.tile * self.pe_count;
        self.out_features.div_ceil(band) * band
    }

    pub fn rows_of_tiles(&self) -> usize {
        self.padded_rows() / self.tile
    }

    pub fn cols_of_tiles(&self) -> usize {
        self.padded_cols() / self.tile
    }

    pub fn cycles_per_slot(&self) -> u32 {
        self.cycles_per_slot.unwrap_or_else(|| default_cycles_per_slot(self.tile))
    }

    pub fn ensure_valid(&self) -> Result<(), LayerError> {
        let diags = validate_config(self);
        if diags.is_empty() {
            Ok(())
        } else {
            Err(LayerError::InvalidConfig(diags))
        }
    }
}

/// Slot budget: 8 weight beats + 3 processing cycles for 8x8 tiles,
/// 4 + 3 for 16x16 tiles.
pub fn default_cycles_per_slot(tile: usize) -> u32 {
    if tile == 16 {
        7
    } else {
        11
    }
}

/// Human-readable problems with a configuration; empty means runnable.
pub fn validate_config(cfg: &LayerConfig) -> Vec<String> {
    let mut diags = Vec::new();
    if cfg.in_features == 0 {
        diags.push("in_features must be at least 1".to_string());
    }
    if cfg.out_features == 0 {
        diags.push("out_features must be at least 1".to_string());
    }
    if cfg.tile != 8 && cfg.tile != 16 {
        diags.push(format!("tile size must be 8 or 16 (got {})", cfg.tile));
    }
    if cfg.pe_count == 0 {
        diags.push("pe_count must be at least 1".to_string());
    }
    if cfg.bias.len() != cfg.out_features {
        diags.push(format!("bias length {} does not match out_features {}", cfg.bias.len(), cfg.out_features));
    }
    if cfg.bias.iter().any(|b| b.format() != cfg.fmt) {
        diags.push(format!("bias words must use the layer format {}", cfg.fmt));
    }
    if !(cfg.clk_hz.is_finite() && cfg.clk_hz > 0.0) {
        diags.push(format!("clock must be positive (got {} Hz)", cfg.clk_hz));
    }
    if cfg.cycles_per_slot == Some(0) {
        diags.push("cycles_per_slot must be at least 1".to_string());
    }
    diags
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TileCoord {
    pub row: usize,
    pub col: usize,
}

/// The padded weight matrix as an `R x C` grid of `T x T` tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    tile: usize,
    rows_of_tiles: usize,
    cols_of_tiles: usize,
    /// First padded row, i.e. `out_features`.
    pub pad_row_start: usize,
    /// First padded column, i.e. `in_features`.
    pub pad_col_start: usize,
    fmt: QFormat,
    // tile-major, row-major inside each tile
    data: Vec<i16>,
}

impl TileGrid {
    pub fn tile_size(&self) -> usize {
        self.tile
    }

    pub fn rows_of_tiles(&self) -> usize {
        self.rows_of_tiles
    }

    pub fn cols_of_tiles(&self) -> usize {
        self.cols_of_tiles
    }

    pub fn format(&self) -> QFormat {
        self.fmt
    }

    /// Row-major `T*T` words of one tile.
    pub fn tile(&self, at: TileCoord) -> &[i16] {
        let words = self.tile * self.tile;
        let idx = at.row * self.cols_of_tiles + at.col;
        &self.data[idx * words..(idx + 1) * words]
    }

    /// Word at padded matrix coordinates.
    pub fn get(&self, row: usize, col: usize) -> i16 {
        let t = self.tile;
        self.tile(TileCoord { row: row / t, col: col / t })[(row % t) * t + col % t]
    }

    /// The unpadded `N x M` matrix.
    pub fn untile(&self) -> WeightMatrix {
        WeightMatrix::from_fn(self.pad_row_start, self.pad_col_start, self.fmt, |r, c| self.get(r, c))
    }
}

pub fn tile_weights(weights: &WeightMatrix, cfg: &LayerConfig) -> Result<TileGrid, LayerError> {
    cfg.ensure_valid()?;
    if weights.rows() != cfg.out_features || weights.cols() != cfg.in_features {
        return Err(LayerError::DimensionMismatch {
            what: "weight matrix shape",
            expected: format!("{}x{}", cfg.out_features, cfg.in_features),
            found: format!("{}x{}", weights.rows(), weights.cols()),
        });
    }
    if weights.format() != cfg.fmt {
        return Err(LayerError::DimensionMismatch {
            what: "weight format",
            expected: cfg.fmt.to_string(),
            found: weights.format().to_string(),
        });
    }
    let t = cfg.tile;
    let (rt, ct) = (cfg.rows_of_tiles(), cfg.cols_of_tiles());
    let (n, m) = (cfg.out_features, cfg.in_features);
    let mut data = vec![0i16; rt * ct * t * t];
    for (idx, block) in data.chunks_exact_mut(t * t).enumerate() {
        let (tr, tc) = (idx / ct, idx % ct);
        for i in 0..t {
            let row = tr * t + i;
            if row >= n {
                break;
            }
            let c0 = tc * t;
            let c1 = (c0 + t).min(m);
            if c0 < c1 {
                block[i * t..i * t + (c1 - c0)].copy_from_slice(&weights.row(row)[c0..c1]);
            }
        }
    }
    Ok(TileGrid {
        tile: t,
        rows_of_tiles: rt,
        cols_of_tiles: ct,
        pad_row_start: n,
        pad_col_start: m,
        fmt: cfg.fmt,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlotAssignment {
    pub pass: usize,
    pub slot: usize,
    pub pe: usize,
    pub tile: TileCoord,
}

/// Passes x time slots; slot `s` of pass `p` gives PE `k` tile
/// `(p*P + k, s)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub passes: usize,
    pub slots_per_pass: usize,
    pub cycles_per_slot: u32,
    pub pe_count: usize,
    pub tile: usize,
}

impl Schedule {
    pub fn assignment(&self, pass: usize, slot: usize, pe: usize) -> TileCoord {
        debug_assert!(pass < self.passes && slot < self.slots_per_pass && pe < self.pe_count);
        TileCoord { row: pass * self.pe_count + pe, col: slot }
    }

    /// All assignments in (pass, slot, pe) order.
    pub fn assignments(&self) -> impl Iterator<Item = SlotAssignment> + '_ {
        (0..self.passes).flat_map(move |pass| {
            (0..self.slots_per_pass).flat_map(move |slot| {
                (0..self.pe_count).map(move |pe| SlotAssignment {
                    pass,
                    slot,
                    pe,
                    tile: self.assignment(pass, slot, pe),
                })
            })
        })
    }

    pub fn total_slots(&self) -> u64 {
        (self.passes * self.slots_per_pass) as u64
    }

    pub fn total_cycles(&self) -> u64 {
        self.total_slots() * self.cycles_per_slot as u64
    }
}

pub fn plan_schedule(cfg: &LayerConfig) -> Result<Schedule, LayerError> {
    cfg.ensure_valid()?;
    let rows = cfg.rows_of_tiles();
    // padded_rows is a multiple of T*P, so this division is exact
    debug_assert_eq!(rows % cfg.pe_count, 0);
    Ok(Schedule {
        passes: rows / cfg.pe_count,
        slots_per_pass: cfg.cols_of_tiles(),
        cycles_per_slot: cfg.cycles_per_slot(),
        pe_count: cfg.pe_count,
        tile: cfg.tile,
    })
}
