//! Functional model of the PE array.
//!
//! Each PE is a `T x T` matrix-vector multiplier (T multipliers and a
//! `T-1` adder tree per row) feeding a `T`-wide vector accumulator. After
//! the last slot of a pass the accumulators go through bias addition,
//! requantization and ReLU. Pipeline registers inside the PE are not
//! modelled; they only change the clock, which the timing module handles.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fxnum::{self, FixedWord, QFormat, WideAcc};
use crate::layer::{plan_schedule, LayerConfig, LayerError, Schedule, TileCoord, TileGrid, WeightMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatapathError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("{0}")]
    DimensionMismatch(String),
}

/// `result[r] = sum_c tile[r][c] * x[c]`, exact.
pub fn mv_mult_tile(tile: &[FixedWord], x: &[FixedWord]) -> Vec<WideAcc> {
    let fmt = x.first().map(|w| w.format());
    assert!(tile.iter().chain(x).all(|w| Some(w.format()) == fmt), "tile and input must share one format");
    let tile: Vec<i16> = tile.iter().map(|w| w.raw()).collect();
    let x: Vec<i16> = x.iter().map(|w| w.raw()).collect();
    mv_mult_tile_raw(&tile, &x)
}

pub(crate) fn mv_mult_tile_raw(tile: &[i16], x: &[i16]) -> Vec<WideAcc> {
    let t = x.len();
    assert_eq!(tile.len(), t * t, "tile is not {t}x{t}");
    tile.chunks_exact(t)
        .map(|row| row.iter().zip(x).fold(WideAcc::ZERO, |acc, (&w, &xi)| fxnum::mac_raw(acc, w, xi)))
        .collect()
}

/// The per-PE vector accumulator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeState {
    pub acc: Vec<WideAcc>,
}

impl PeState {
    pub fn new(tile: usize) -> Self {
        PeState { acc: vec![WideAcc::ZERO; tile] }
    }

    pub fn reset(&mut self) {
        self.acc.fill(WideAcc::ZERO);
    }

    pub fn v_accum(&mut self, partial: &[WideAcc]) {
        assert_eq!(partial.len(), self.acc.len(), "partial sum width mismatch");
        for (a, p) in self.acc.iter_mut().zip(partial) {
            *a = *a + *p;
        }
    }
}

/// Functional form of [`PeState::v_accum`].
pub fn v_accum(mut state: PeState, partial: &[WideAcc]) -> PeState {
    state.v_accum(partial);
    state
}

/// `max(0, requantize(acc + bias))`.
pub fn bias_relu(acc: WideAcc, bias: FixedWord, fmt: QFormat) -> FixedWord {
    let y = fxnum::requantize(acc + WideAcc::promote(bias), fmt);
    if y.raw() < 0 {
        FixedWord::zero(fmt)
    } else {
        y
    }
}

/// Receives one time slot's worth of tiles, one per PE, plus the slot's
/// input vector.
pub trait SlotConsumer {
    fn consume_slot(&mut self, pass: usize, slot: usize, tiles: &[&[i16]], x: &[i16]);
    fn end_pass(&mut self, pass: usize);
}

/// The P processing elements and the output buffer they write.
#[derive(Debug, Clone)]
pub struct PeArray {
    tile: usize,
    fmt: QFormat,
    bias: Vec<FixedWord>,
    out_features: usize,
    pes: Vec<PeState>,
    outputs: Vec<FixedWord>,
    parallel: bool,
}

impl PeArray {
    pub fn new(cfg: &LayerConfig) -> Self {
        PeArray {
            tile: cfg.tile,
            fmt: cfg.fmt,
            bias: cfg.bias.clone(),
            out_features: cfg.out_features,
            pes: vec![PeState::new(cfg.tile); cfg.pe_count],
            outputs: vec![FixedWord::zero(cfg.fmt); cfg.out_features],
            parallel: true,
        }
    }

    /// Evaluate the PEs of a slot on the rayon pool (default) or serially.
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn pe_states(&self) -> &[PeState] {
        &self.pes
    }

    pub fn into_outputs(self) -> Vec<FixedWord> {
        self.outputs
    }
}

impl SlotConsumer for PeArray {
    fn consume_slot(&mut self, _pass: usize, _slot: usize, tiles: &[&[i16]], x: &[i16]) {
        assert_eq!(tiles.len(), self.pes.len(), "one tile per PE");
        let step = |(pe, tile): (&mut PeState, &&[i16])| pe.v_accum(&mv_mult_tile_raw(tile, x));
        if self.parallel {
            self.pes.par_iter_mut().zip(tiles.par_iter()).for_each(step);
        } else {
            self.pes.iter_mut().zip(tiles.iter()).for_each(step);
        }
    }

    fn end_pass(&mut self, pass: usize) {
        let band = self.pes.len() * self.tile;
        for (k, pe) in self.pes.iter_mut().enumerate() {
            for (i, acc) in pe.acc.iter().enumerate() {
                let row = pass * band + k * self.tile + i;
                if row < self.out_features {
                    self.outputs[row] = bias_relu(*acc, self.bias[row], self.fmt);
                }
            }
            pe.reset();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlotTrace {
    pub pass: usize,
    pub slot: usize,
    pub tiles: Vec<TileCoord>,
    pub weight_words_read: usize,
    pub input_words_read: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceResult {
    pub outputs: Vec<FixedWord>,
    pub trace: Option<Vec<SlotTrace>>,
}

#[derive(Debug, Clone, Default)]
pub struct InferenceOptions {
    pub trace: bool,
    /// Permutation of `0..slots_per_pass` applied within every pass.
    pub slot_order: Option<Vec<usize>>,
    pub serial: bool,
}

fn check_inputs(cfg: &LayerConfig, x: &[FixedWord]) -> Result<(), DatapathError> {
    cfg.ensure_valid()?;
    if x.len() != cfg.in_features {
        return Err(DatapathError::DimensionMismatch(format!(
            "input length {} does not match in_features {}",
            x.len(),
            cfg.in_features
        )));
    }
    if x.iter().any(|w| w.format() != cfg.fmt) {
        return Err(DatapathError::DimensionMismatch(format!("inputs must use {}", cfg.fmt)));
    }
    Ok(())
}

pub fn run_inference(cfg: &LayerConfig, grid: &TileGrid, x: &[FixedWord]) -> Result<InferenceResult, DatapathError> {
    run_inference_with(cfg, grid, x, &InferenceOptions::default())
}

/// Evaluate the layer tile by tile under the column-row-column schedule.
pub fn run_inference_with(
    cfg: &LayerConfig,
    grid: &TileGrid,
    x: &[FixedWord],
    opts: &InferenceOptions,
) -> Result<InferenceResult, DatapathError> {
    check_inputs(cfg, x)?;
    let sched = plan_schedule(cfg)?;
    if grid.tile_size() != cfg.tile
        || grid.rows_of_tiles() != cfg.rows_of_tiles()
        || grid.cols_of_tiles() != cfg.cols_of_tiles()
        || grid.format() != cfg.fmt
    {
        return Err(DatapathError::DimensionMismatch("tile grid does not match layer configuration".into()));
    }
    let order = slot_order(&sched, opts)?;
    let t = cfg.tile;
    let mut xs: Vec<i16> = x.iter().map(|w| w.raw()).collect();
    xs.resize(cfg.padded_cols(), 0);

    let mut array = PeArray::new(cfg).parallel(!opts.serial);
    let mut trace = opts.trace.then(Vec::new);
    for pass in 0..sched.passes {
        for &slot in &order {
            let coords: Vec<TileCoord> = (0..sched.pe_count).map(|pe| sched.assignment(pass, slot, pe)).collect();
            let tiles: Vec<&[i16]> = coords.iter().map(|&c| grid.tile(c)).collect();
            array.consume_slot(pass, slot, &tiles, &xs[slot * t..(slot + 1) * t]);
            if let Some(tr) = trace.as_mut() {
                tr.push(SlotTrace {
                    pass,
                    slot,
                    weight_words_read: coords.len() * t * t,
                    input_words_read: t,
                    tiles: coords,
                });
            }
        }
        array.end_pass(pass);
    }
    Ok(InferenceResult { outputs: array.into_outputs(), trace })
}

fn slot_order(sched: &Schedule, opts: &InferenceOptions) -> Result<Vec<usize>, DatapathError> {
    match &opts.slot_order {
        None => Ok((0..sched.slots_per_pass).collect()),
        Some(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..sched.slots_per_pass).collect::<Vec<_>>() {
                return Err(DatapathError::DimensionMismatch(format!(
                    "slot order is not a permutation of 0..{}",
                    sched.slots_per_pass
                )));
            }
            Ok(order.clone())
        }
    }
}

/// Untiled row-by-row evaluation with the same numerics as the PE array.
pub fn reference_serial_fixed(
    cfg: &LayerConfig,
    weights: &WeightMatrix,
    x: &[FixedWord],
) -> Result<Vec<FixedWord>, DatapathError> {
    check_inputs(cfg, x)?;
    if weights.rows() != cfg.out_features || weights.cols() != cfg.in_features || weights.format() != cfg.fmt {
        return Err(DatapathError::DimensionMismatch(format!(
            "weights are {}x{} {}, layer needs {}x{} {}",
            weights.rows(),
            weights.cols(),
            weights.format(),
            cfg.out_features,
            cfg.in_features,
            cfg.fmt
        )));
    }
    Ok((0..cfg.out_features)
        .map(|n| {
            let acc =
                weights.row(n).iter().zip(x).fold(WideAcc::ZERO, |acc, (&w, xi)| {
                    fxnum::mac(acc, FixedWord::from_raw_unchecked(w, cfg.fmt), *xi)
                });
            bias_relu(acc, cfg.bias[n], cfg.fmt)
        })
        .collect())
}

/// `ReLU(W x + b)` in f64, with `b` the layer's bias words taken exactly.
/// `weights` is row-major `out_features x in_features`.
pub fn reference_real(cfg: &LayerConfig, weights: &[f64], x: &[f64]) -> Result<Vec<f64>, DatapathError> {
    let (n, m) = (cfg.out_features, cfg.in_features);
    if weights.len() != n * m || x.len() != m || cfg.bias.len() != n {
        return Err(DatapathError::DimensionMismatch(format!(
            "real reference needs {n}x{m} weights, {m} inputs and {n} biases"
        )));
    }
    Ok(weights
        .chunks_exact(m)
        .zip(&cfg.bias)
        .map(|(row, b)| {
            let dot: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
            (dot + b.to_f64()).max(0.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxnum::quantize;
    use crate::layer::tile_weights;

    const F: QFormat = QFormat::Q16_10;

    fn w(x: f64) -> FixedWord {
        quantize(x, F).unwrap()
    }

    #[test]
    fn identity_tile() {
        let tile: Vec<FixedWord> = (0..64).map(|i| if i % 9 == 0 { w(1.0) } else { w(0.0) }).collect();
        let x: Vec<FixedWord> = (0..8).map(|i| w(i as f64 - 3.5)).collect();
        let out = mv_mult_tile(&tile, &x);
        for (o, xi) in out.iter().zip(&x) {
            assert_eq!(*o, WideAcc::promote(*xi));
        }
        let zero = vec![w(0.0); 64];
        assert!(mv_mult_tile(&zero, &x).iter().all(|a| *a == WideAcc::ZERO));
    }

    #[test]
    fn v_accum_basics() {
        let p = vec![WideAcc::from_raw(5), WideAcc::from_raw(-7)];
        assert_eq!(v_accum(PeState::new(2), &p).acc, p);
        let q = vec![WideAcc::from_raw(1), WideAcc::from_raw(2)];
        assert_eq!(v_accum(v_accum(PeState::new(2), &p), &q), v_accum(v_accum(PeState::new(2), &q), &p));
    }

    #[test]
    fn bias_relu_examples() {
        let acc = |v: f64| WideAcc::from_raw((v * (1u64 << 20) as f64) as i64);
        assert_eq!(bias_relu(acc(-3.0), w(0.0), F).raw(), 0);
        assert_eq!(bias_relu(acc(0.0), w(0.5), F).raw(), 512);
        assert_eq!(bias_relu(acc(1.25), w(-1.25), F).raw(), 0);
        assert_eq!(bias_relu(acc(100.0), w(0.0), F).raw(), 32767);
    }

    #[test]
    fn zero_input_gives_relu_bias() {
        let bias: Vec<FixedWord> = (0..20).map(|i| w(i as f64 * 0.25 - 2.0)).collect();
        let cfg = LayerConfig::new(30, 20, 8).with_pe_count(2).with_bias(bias.clone());
        let weights = WeightMatrix::from_fn(20, 30, F, |r, c| (r * 37 + c) as i16);
        let grid = tile_weights(&weights, &cfg).unwrap();
        let out = run_inference(&cfg, &grid, &[w(0.0); 30]).unwrap().outputs;
        for (o, b) in out.iter().zip(&bias) {
            assert_eq!(o.raw(), b.raw().max(0));
        }
    }

    #[test]
    fn identity_layer_passes_inputs() {
        let cfg = LayerConfig::new(8, 8, 8).with_pe_count(1);
        let weights = WeightMatrix::from_fn(8, 8, F, |r, c| if r == c { 1024 } else { 0 });
        let grid = tile_weights(&weights, &cfg).unwrap();
        let x: Vec<FixedWord> = (0..8).map(|i| w(i as f64 * 1.5)).collect();
        assert_eq!(run_inference(&cfg, &grid, &x).unwrap().outputs, x);
        let ident: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        let xr: Vec<f64> = (0..8).map(|i| i as f64 * 0.3).collect();
        assert_eq!(reference_real(&cfg, &ident, &xr).unwrap(), xr);
        let neg: Vec<f64> = xr.iter().map(|v| -v - 1.0).collect();
        assert_eq!(reference_real(&cfg, &ident, &neg).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn trace_lists_every_tile_once() {
        let cfg = LayerConfig::new(40, 50, 8).with_pe_count(2);
        let weights = WeightMatrix::from_fn(50, 40, F, |r, c| (r as i16) - (c as i16));
        let grid = tile_weights(&weights, &cfg).unwrap();
        let opts = InferenceOptions { trace: true, ..Default::default() };
        let res = run_inference_with(&cfg, &grid, &[w(0.5); 40], &opts).unwrap();
        let mut tiles: Vec<_> = res.trace.unwrap().into_iter().flat_map(|s| s.tiles).collect();
        let n = tiles.len();
        tiles.sort();
        tiles.dedup();
        assert_eq!(n, tiles.len());
        assert_eq!(n, cfg.rows_of_tiles() * cfg.cols_of_tiles());
    }

    #[test]
    fn dimension_errors() {
        let cfg = LayerConfig::new(8, 8, 8).with_pe_count(1);
        let grid = tile_weights(&WeightMatrix::zeros(8, 8, F), &cfg).unwrap();
        assert!(run_inference(&cfg, &grid, &[w(0.0); 7]).is_err());
        assert!(reference_serial_fixed(&cfg, &WeightMatrix::zeros(8, 9, F), &[w(0.0); 8]).is_err());
        let opts = InferenceOptions { slot_order: Some(vec![1]), ..Default::default() };
        assert!(run_inference_with(&cfg, &grid, &[w(0.0); 8], &opts).is_err());
    }

    #[test]
    fn zero_weights_reference() {
        let bias: Vec<FixedWord> = vec![w(-1.0), w(2.0), w(0.0)];
        let cfg = LayerConfig::new(5, 3, 8).with_bias(bias);
        let out = reference_serial_fixed(&cfg, &WeightMatrix::zeros(3, 5, F), &[w(3.0); 5]).unwrap();
        assert_eq!(out.iter().map(|o| o.raw()).collect::<Vec<_>>(), vec![0, 2048, 0]);
    }
}
