//! C ABI over the `fcaccel` simulator.
//!
//! Every fallible function returns an [`FcaStatus`]; on anything other than
//! `FCA_STATUS_OK` a description is available from
//! [`fca_last_error_message`] on the same thread. Handles are opaque and
//! must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use fcaccel::datapath::run_inference;
use fcaccel::{
    peak_gops, plan_schedule, quantize, reference_serial_fixed, requantize, simulate_analytic, simulate_detailed,
    tile_weights, Block, ClockSpec, FixedWord, LayerConfig, LayerPreset, MemorySystem, PowerModel, QFormat, SimReport,
    WeightMatrix, WideAcc,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    SimulationFailed = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcaMode {
    Analytic = 0,
    /// Two-clock event simulation with a feasibility verdict.
    Detailed = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcaBlock {
    MvMult = 0,
    VAccum = 1,
    AddBiasRelu = 2,
}

/// Opaque layer configuration.
pub struct FcaLayer {
    cfg: LayerConfig,
}

/// Opaque simulation report.
pub struct FcaReport {
    report: SimReport,
    json: Vec<u8>,
}

/// Scalar view of a report. `feasible` is -1 for analytic reports.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FcaSummary {
    pub passes: u64,
    pub slots_per_pass: u64,
    pub cycles_per_slot: u32,
    pub total_cycles: u64,
    pub rd_clk_hz: f64,
    pub latency_s: f64,
    pub effective_gops: f64,
    pub power_w: f64,
    pub energy_j: f64,
    pub feasible: i32,
    pub stall_cycles: u64,
    pub fifo_faults: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(FcaStatus, String);

impl Failure {
    fn new(status: FcaStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FcaStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FcaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FcaStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(FcaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn words(raws: &[i16], fmt: QFormat) -> Vec<FixedWord> {
    raws.iter().map(|&r| FixedWord::from_raw(r, fmt).expect("16-bit format")).collect()
}

fn format_for(frac_bits: u32) -> Result<QFormat, Failure> {
    QFormat::new(16, frac_bits).map_err(|e| Failure::new(FcaStatus::InvalidArgument, e))
}

fn boxed_layer(cfg: LayerConfig, out: *mut *mut FcaLayer) -> Result<(), Failure> {
    cfg.ensure_valid().map_err(|e| Failure::new(FcaStatus::InvalidConfig, e))?;
    unsafe { *out = Box::into_raw(Box::new(FcaLayer { cfg })) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fca_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Create a layer from a preset name such as `"fc8-alex"` or `"fc7"`.
///
/// # Safety
/// `name` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fca_layer_new_preset(name: *const c_char, out: *mut *mut FcaLayer) -> FcaStatus {
    guard(|| {
        nonnull(name, "name")?;
        nonnull(out, "out")?;
        let name = CStr::from_ptr(name).to_str().map_err(|e| Failure::new(FcaStatus::InvalidArgument, e))?;
        let preset: LayerPreset = name.parse().map_err(|e| Failure::new(FcaStatus::InvalidArgument, e))?;
        boxed_layer(LayerConfig::from_preset(preset), out)
    })
}

/// Create a layer with `in_features` inputs and `out_features` outputs.
/// The reference clock follows `pipelined`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fca_layer_new_custom(
    in_features: usize,
    out_features: usize,
    tile: usize,
    pe_count: usize,
    pipelined: bool,
    out: *mut *mut FcaLayer,
) -> FcaStatus {
    guard(|| {
        nonnull(out, "out")?;
        let cfg = LayerConfig::new(in_features, out_features, tile).with_pe_count(pe_count).with_pipelined(pipelined);
        boxed_layer(cfg, out)
    })
}

/// Replace the layer's bias with `len` raw words in the layer's format.
///
/// # Safety
/// `layer` must be a live handle; `bias` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn fca_layer_set_bias(layer: *mut FcaLayer, bias: *const i16, len: usize) -> FcaStatus {
    guard(|| {
        nonnull(layer, "layer")?;
        let layer = &mut *layer;
        if len != layer.cfg.out_features {
            return Err(Failure::new(
                FcaStatus::InvalidArgument,
                format!("bias length {len} != out_features {}", layer.cfg.out_features),
            ));
        }
        layer.cfg.bias = words(slice(bias, len, "bias")?, layer.cfg.fmt);
        Ok(())
    })
}

/// # Safety
/// `layer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fca_layer_free(layer: *mut FcaLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Simulate one inference. `rd_clk_hz <= 0` selects the layer's reference
/// clock. An infeasible detailed run still returns `FCA_STATUS_OK`; check
/// `feasible` in the summary.
///
/// # Safety
/// `layer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fca_simulate(
    layer: *const FcaLayer,
    mode: FcaMode,
    rd_clk_hz: f64,
    out: *mut *mut FcaReport,
) -> FcaStatus {
    guard(|| {
        nonnull(layer, "layer")?;
        nonnull(out, "out")?;
        let cfg = &(*layer).cfg;
        let sim = |e: &dyn std::fmt::Display| Failure::new(FcaStatus::SimulationFailed, e);
        let clocks = if rd_clk_hz > 0.0 {
            ClockSpec::exact(rd_clk_hz, fcaccel::memsys::HBM_WR_CLK_HZ)
                .map_err(|e| Failure::new(FcaStatus::InvalidArgument, e))?
        } else {
            ClockSpec::for_layer(cfg).map_err(|e| sim(&e))?
        };
        let sched = plan_schedule(cfg).map_err(|e| Failure::new(FcaStatus::InvalidConfig, e))?;
        let report = match mode {
            FcaMode::Analytic => simulate_analytic(cfg, &sched, &clocks),
            FcaMode::Detailed => {
                let mut mem = MemorySystem::timing_only(cfg).map_err(|e| sim(&e))?;
                simulate_detailed(cfg, &sched, &clocks, &mut mem, None).map_err(|e| sim(&e))?
            }
        }
        .with_energy(&PowerModel::synthesized(cfg.pipelined));
        let json = serde_json::to_vec(&report).map_err(|e| sim(&e))?;
        *out = Box::into_raw(Box::new(FcaReport { report, json }));
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fca_report_summary(report: *const FcaReport, out: *mut FcaSummary) -> FcaStatus {
    guard(|| {
        nonnull(report, "report")?;
        nonnull(out, "out")?;
        let r = &(*report).report;
        let energy = r.energy.as_ref();
        let f = r.feasibility.as_ref();
        *out = FcaSummary {
            passes: r.passes as u64,
            slots_per_pass: r.slots_per_pass as u64,
            cycles_per_slot: r.cycles_per_slot,
            total_cycles: r.total_cycles,
            rd_clk_hz: r.rd_clk_hz,
            latency_s: r.latency_s,
            effective_gops: r.effective_gops,
            power_w: energy.map_or(0.0, |e| e.power_w),
            energy_j: energy.map_or(0.0, |e| e.energy_j),
            feasible: f.map_or(-1, |f| f.feasible as i32),
            stall_cycles: f.map_or(0, |f| f.stall_cycles),
            fifo_faults: f.map_or(0, |f| f.fifo_faults.len() as u64),
        };
        Ok(())
    })
}

/// Copy the report as JSON into `buf` with a trailing NUL. `needed` receives
/// the JSON length without the NUL; `FCA_STATUS_BUFFER_TOO_SMALL` when
/// `len <= needed`.
///
/// # Safety
/// `report` must be a live handle, `buf` null or `len` writable bytes,
/// `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fca_report_json(
    report: *const FcaReport,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FcaStatus {
    guard(|| {
        nonnull(report, "report")?;
        let json = &(*report).json;
        if !needed.is_null() {
            *needed = json.len();
        }
        if buf.is_null() || len <= json.len() {
            return Err(Failure::new(FcaStatus::BufferTooSmall, format!("report needs {} bytes plus NUL", json.len())));
        }
        ptr::copy_nonoverlapping(json.as_ptr().cast(), buf, json.len());
        *buf.add(json.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fca_report_free(report: *mut FcaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Peak throughput of one block at the layer's reference clock, in GOPS.
///
/// # Safety
/// `layer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fca_peak_gops(layer: *const FcaLayer, block: FcaBlock, out: *mut f64) -> FcaStatus {
    guard(|| {
        nonnull(layer, "layer")?;
        nonnull(out, "out")?;
        let cfg = &(*layer).cfg;
        let clocks = ClockSpec::for_layer(cfg).map_err(|e| Failure::new(FcaStatus::InvalidConfig, e))?;
        let block = match block {
            FcaBlock::MvMult => Block::MvMult,
            FcaBlock::VAccum => Block::VAccum,
            FcaBlock::AddBiasRelu => Block::AddBiasRelu,
        };
        *out = peak_gops(block, cfg, &clocks);
        Ok(())
    })
}

/// Round `x` half-to-even onto a 16-bit grid with `frac_bits` fractional
/// bits, saturating.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fca_quantize(x: f64, frac_bits: u32, out: *mut i16) -> FcaStatus {
    guard(|| {
        nonnull(out, "out")?;
        let w = quantize(x, format_for(frac_bits)?).map_err(|e| Failure::new(FcaStatus::InvalidArgument, e))?;
        *out = w.raw();
        Ok(())
    })
}

/// Narrow a raw accumulator (scale `2^(-2*frac_bits)`) to a 16-bit word.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fca_requantize(acc: i64, frac_bits: u32, out: *mut i16) -> FcaStatus {
    guard(|| {
        nonnull(out, "out")?;
        let fmt = format_for(frac_bits)?;
        if !(-(1i64 << 47)..(1i64 << 47)).contains(&acc) {
            return Err(Failure::new(FcaStatus::InvalidArgument, format!("accumulator {acc} exceeds 48 bits")));
        }
        *out = requantize(WideAcc::from_raw(acc), fmt).raw();
        Ok(())
    })
}

type Evaluator = fn(&LayerConfig, &WeightMatrix, &[FixedWord]) -> Result<Vec<FixedWord>, Failure>;

unsafe fn evaluate(
    layer: *const FcaLayer,
    weights: *const i16,
    x: *const i16,
    out: *mut i16,
    out_len: usize,
    eval: Evaluator,
) -> FcaStatus {
    guard(|| {
        nonnull(layer, "layer")?;
        let cfg = &(*layer).cfg;
        let (m, n) = (cfg.in_features, cfg.out_features);
        if out_len < n {
            return Err(Failure::new(FcaStatus::BufferTooSmall, format!("need {n} outputs, got room for {out_len}")));
        }
        nonnull(out, "out")?;
        let w = WeightMatrix::new(n, m, cfg.fmt, slice(weights, n * m, "weights")?.to_vec())
            .map_err(|e| Failure::new(FcaStatus::InvalidArgument, e))?;
        let xs = words(slice(x, m, "x")?, cfg.fmt);
        let y = eval(cfg, &w, &xs)?;
        for (i, v) in y.iter().enumerate() {
            *out.add(i) = v.raw();
        }
        Ok(())
    })
}

/// Tiled evaluation of `ReLU(W x + b)`. `weights` is row-major
/// `out_features x in_features`, `x` has `in_features` words and `out`
/// room for `out_features`.
///
/// # Safety
/// All pointers must be valid for the lengths above.
#[no_mangle]
pub unsafe extern "C" fn fca_run_inference(
    layer: *const FcaLayer,
    weights: *const i16,
    x: *const i16,
    out: *mut i16,
    out_len: usize,
) -> FcaStatus {
    evaluate(layer, weights, x, out, out_len, |cfg, w, xs| {
        let grid = tile_weights(w, cfg).map_err(|e| Failure::new(FcaStatus::InvalidConfig, e))?;
        run_inference(cfg, &grid, xs).map(|r| r.outputs).map_err(|e| Failure::new(FcaStatus::SimulationFailed, e))
    })
}

/// Row-by-row evaluation with the same numerics, for cross-checking.
///
/// # Safety
/// As for [`fca_run_inference`].
#[no_mangle]
pub unsafe extern "C" fn fca_reference_serial(
    layer: *const FcaLayer,
    weights: *const i16,
    x: *const i16,
    out: *mut i16,
    out_len: usize,
) -> FcaStatus {
    evaluate(layer, weights, x, out, out_len, |cfg, w, xs| {
        reference_serial_fixed(cfg, w, xs).map_err(|e| Failure::new(FcaStatus::SimulationFailed, e))
    })
}
