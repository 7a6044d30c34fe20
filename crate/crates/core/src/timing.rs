//! Cycle counts, latency, throughput and energy.
//!
//! [`simulate_analytic`] multiplies out the schedule. [`simulate_detailed`]
//! co-simulates the HBM write clock and the PE read clock: the controller
//! streams burst reads into the DPR-BUF FIFOs under credit flow control,
//! beats cross into the read domain through a two-stage synchronizer, and
//! each slot loads its tile register on the last read cycle before the
//! three processing cycles. A slot whose tile has not arrived stalls and
//! makes the run infeasible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::datapath::SlotConsumer;
use crate::layer::{LayerConfig, Schedule, PIPELINED_CLK_HZ};
use crate::memsys::{DprBuf, FifoFault, MemError, MemorySystem, ReadEvent, ReadSource, FIFO_DEPTH, HBM_WR_CLK_HZ};

/// Reporting period of the pipelined PE (critical path of the pipelined
/// adder tree).
pub const PIPELINED_PERIOD_S: f64 = 1.51e-9;
/// Processing cycles at the end of every slot (multiply, accumulate, write back).
pub const PROCESSING_CYCLES: u32 = 3;
/// Synchronizer stages on each clock-domain crossing.
pub const SYNC_STAGES: i64 = 2;

const MAX_STALL_PER_SLOT: u64 = 1 << 20;
const MAX_VIOLATIONS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("invalid clock specification: {0}")]
    InvalidClock(String),
    #[error("unknown block '{0}' (expected mv-mult, v-accum or add-bias-relu)")]
    UnknownBlock(String),
    #[error("latency must be positive to compute throughput")]
    ZeroLatency,
    #[error("schedule does not match memory system: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Mem(#[from] MemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClockSpec {
    pub rd_clk_hz: f64,
    pub wr_clk_hz: f64,
    /// Period used to turn cycles into seconds.
    pub rd_period_s: f64,
}

impl ClockSpec {
    pub fn new(rd_clk_hz: f64, wr_clk_hz: f64, rd_period_s: f64) -> Result<Self, TimingError> {
        for (name, v) in [("rd_clk_hz", rd_clk_hz), ("wr_clk_hz", wr_clk_hz), ("rd_period_s", rd_period_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(TimingError::InvalidClock(format!("{name} must be positive (got {v})")));
            }
        }
        let mismatch = (rd_period_s * rd_clk_hz - 1.0).abs();
        if mismatch > 0.005 {
            return Err(TimingError::InvalidClock(format!(
                "period {rd_period_s} s is {:.2}% off 1/{rd_clk_hz} Hz",
                mismatch * 100.0
            )));
        }
        Ok(ClockSpec { rd_clk_hz, wr_clk_hz, rd_period_s })
    }

    /// Period exactly `1/rd_clk_hz`.
    pub fn exact(rd_clk_hz: f64, wr_clk_hz: f64) -> Result<Self, TimingError> {
        Self::new(rd_clk_hz, wr_clk_hz, 1.0 / rd_clk_hz)
    }

    /// 662 MHz reported at 1.51 ns, or 100 MHz at 10 ns.
    pub fn reference(pipelined: bool) -> Self {
        if pipelined {
            ClockSpec { rd_clk_hz: PIPELINED_CLK_HZ, wr_clk_hz: HBM_WR_CLK_HZ, rd_period_s: PIPELINED_PERIOD_S }
        } else {
            ClockSpec { rd_clk_hz: 100e6, wr_clk_hz: HBM_WR_CLK_HZ, rd_period_s: 10e-9 }
        }
    }

    /// Reference clocks when the layer runs at 662 MHz, exact period otherwise.
    pub fn for_layer(cfg: &LayerConfig) -> Result<Self, TimingError> {
        if cfg.clk_hz == PIPELINED_CLK_HZ {
            Ok(Self::reference(true))
        } else {
            Self::exact(cfg.clk_hz, HBM_WR_CLK_HZ)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Block {
    MvMult,
    VAccum,
    AddBiasRelu,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::MvMult, Block::VAccum, Block::AddBiasRelu];

    pub fn name(self) -> &'static str {
        match self {
            Block::MvMult => "mv-mult",
            Block::VAccum => "v-accum",
            Block::AddBiasRelu => "add-bias-relu",
        }
    }

    /// Operations per PE-array cycle: `T^2` multiplies plus `T(T-1)` tree
    /// adds for the multiplier, `2T` for the accumulator, `T` for bias/ReLU.
    pub fn ops_per_cycle(self, tile: usize, pe_count: usize) -> u64 {
        let (t, p) = (tile as u64, pe_count as u64);
        p * match self {
            Block::MvMult => t * t + t * (t - 1),
            Block::VAccum => 2 * t,
            Block::AddBiasRelu => t,
        }
    }
}

impl FromStr for Block {
    type Err = TimingError;
    fn from_str(s: &str) -> Result<Self, TimingError> {
        Block::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| TimingError::UnknownBlock(s.to_string()))
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Peak throughput of one datapath block, in GOPS.
pub fn peak_gops(block: Block, cfg: &LayerConfig, clocks: &ClockSpec) -> f64 {
    block.ops_per_cycle(cfg.tile, cfg.pe_count) as f64 / clocks.rd_period_s / 1e9
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerModel {
    pub total_w: f64,
    /// Per-PE block power where known.
    pub per_block_w: BTreeMap<String, f64>,
}

impl PowerModel {
    /// Whole-array power of the synthesized 8x8 designs (leakage plus
    /// dynamic, memory interfaces excluded).
    pub fn synthesized(pipelined: bool) -> Self {
        if pipelined {
            PowerModel {
                total_w: 90.1,
                per_block_w: BTreeMap::from([
                    ("mv-mult".to_string(), 0.5816),
                    ("v-accum".to_string(), 0.0123),
                    ("total-pe".to_string(), 0.5939),
                ]),
            }
        } else {
            PowerModel { total_w: 17.2, per_block_w: BTreeMap::new() }
        }
    }

    pub fn constant(total_w: f64) -> Self {
        PowerModel { total_w: total_w.max(0.0), per_block_w: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyEstimate {
    pub power_w: f64,
    pub energy_j: f64,
    /// `None` when the power model is zero.
    pub gops_per_watt: Option<f64>,
    /// Which GOPS figure the ratio uses.
    pub gops_metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// Read-domain cycles including stalls.
    pub actual_cycles: u64,
    pub stall_cycles: u64,
    pub fifo_faults: Vec<FifoFault>,
    /// First violations, in simulation order.
    pub violations: Vec<String>,
    pub max_fifo_occupancy: usize,
    pub weight_reads: usize,
    pub input_reads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub mode: String,
    pub in_features: usize,
    pub out_features: usize,
    pub tile: usize,
    pub pe_count: usize,
    pub pipelined: bool,
    pub passes: usize,
    pub slots_per_pass: usize,
    pub cycles_per_slot: u32,
    pub total_cycles: u64,
    pub rd_clk_hz: f64,
    pub rd_period_s: f64,
    pub latency_s: f64,
    pub peak_gops_per_block: BTreeMap<String, f64>,
    pub effective_gops: f64,
    pub energy: Option<EnergyEstimate>,
    pub feasibility: Option<Feasibility>,
}

impl SimReport {
    pub fn latency_us(&self) -> f64 {
        self.latency_s * 1e6
    }

    pub fn feasible(&self) -> Option<bool> {
        self.feasibility.as_ref().map(|f| f.feasible)
    }

    pub fn with_energy(mut self, pm: &PowerModel) -> Self {
        self.energy = Some(estimate_energy(&self, pm));
        self
    }

    /// Arithmetic identities every report must satisfy.
    pub fn check_invariants(&self) -> Result<(), String> {
        let expect = self.passes as u64 * self.slots_per_pass as u64 * self.cycles_per_slot as u64;
        if self.total_cycles != expect {
            return Err(format!("total_cycles {} != {expect}", self.total_cycles));
        }
        let lat = self.total_cycles as f64 * self.rd_period_s;
        if (self.latency_s - lat).abs() > lat * 1e-12 {
            return Err(format!("latency {} != cycles x period {lat}", self.latency_s));
        }
        if let Some(f) = &self.feasibility {
            if f.feasible && f.actual_cycles != self.total_cycles {
                return Err(format!(
                    "feasible run took {} cycles, schedule says {}",
                    f.actual_cycles, self.total_cycles
                ));
            }
        }
        Ok(())
    }
}

/// Useful work of the unpadded layer (one multiply and one add per weight)
/// over the report's latency.
pub fn effective_gops(cfg: &LayerConfig, report: &SimReport) -> Result<f64, TimingError> {
    if report.latency_s.is_nan() || report.latency_s <= 0.0 {
        return Err(TimingError::ZeroLatency);
    }
    Ok(2.0 * cfg.in_features as f64 * cfg.out_features as f64 / report.latency_s / 1e9)
}

/// Energy of one inference from total power; GOPS/W uses effective GOPS.
pub fn estimate_energy(report: &SimReport, pm: &PowerModel) -> EnergyEstimate {
    EnergyEstimate {
        power_w: pm.total_w,
        energy_j: pm.total_w * report.latency_s,
        gops_per_watt: (pm.total_w > 0.0).then(|| report.effective_gops / pm.total_w),
        gops_metric: "effective".to_string(),
    }
}

pub fn simulate_analytic(cfg: &LayerConfig, sched: &Schedule, clocks: &ClockSpec) -> SimReport {
    let total_cycles = sched.total_cycles();
    let latency_s = total_cycles as f64 * clocks.rd_period_s;
    let effective =
        if latency_s > 0.0 { 2.0 * cfg.in_features as f64 * cfg.out_features as f64 / latency_s / 1e9 } else { 0.0 };
    SimReport {
        mode: "analytic".to_string(),
        in_features: cfg.in_features,
        out_features: cfg.out_features,
        tile: cfg.tile,
        pe_count: cfg.pe_count,
        pipelined: cfg.pipelined,
        passes: sched.passes,
        slots_per_pass: sched.slots_per_pass,
        cycles_per_slot: sched.cycles_per_slot,
        total_cycles,
        rd_clk_hz: clocks.rd_clk_hz,
        rd_period_s: clocks.rd_period_s,
        latency_s,
        peak_gops_per_block: Block::ALL
            .into_iter()
            .map(|b| (b.name().to_string(), peak_gops(b, cfg, clocks)))
            .collect(),
        effective_gops: effective,
        energy: None,
        feasibility: None,
    }
}

fn period_fs(seconds: f64) -> i64 {
    (seconds * 1e15).round() as i64
}

// Tie order at equal timestamps: captures, then issues, then loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Capture,
    Issue { tile: usize, wr_cycle: u64 },
    Load { tile: usize },
}

struct Controller<'a> {
    mem: &'a mut MemorySystem,
    bufs: Vec<DprBuf>,
    in_flight: VecDeque<Vec<Vec<i16>>>,
    dequeued_at: Vec<Option<i64>>,
    blocked_issue: Option<(usize, u64)>,
    faults: Vec<FifoFault>,
    max_occupancy: usize,
}

/// Event-driven two-clock simulation of one inference. Tiles delivered to
/// the PE array are handed to `sink` when given (requires a memory system
/// loaded with data).
pub fn simulate_detailed(
    cfg: &LayerConfig,
    sched: &Schedule,
    clocks: &ClockSpec,
    mem: &mut MemorySystem,
    mut sink: Option<&mut dyn SlotConsumer>,
) -> Result<SimReport, TimingError> {
    let map = mem.map.clone();
    if map.passes != sched.passes || map.slots_per_pass != sched.slots_per_pass || map.channels != sched.pe_count {
        return Err(TimingError::Mismatch(format!(
            "memory holds {}x{} slots on {} channels, schedule wants {}x{} on {}",
            map.passes, map.slots_per_pass, map.channels, sched.passes, sched.slots_per_pass, sched.pe_count
        )));
    }
    if sink.is_some() && !mem.has_payload() {
        return Err(TimingError::Mismatch("a slot consumer needs a memory system loaded with weights".into()));
    }
    let mut report = simulate_analytic(cfg, sched, clocks);
    report.mode = "detailed".to_string();

    let cps = sched.cycles_per_slot;
    if cps <= PROCESSING_CYCLES {
        report.feasibility = Some(Feasibility {
            feasible: false,
            actual_cycles: 0,
            stall_cycles: 0,
            fifo_faults: Vec::new(),
            violations: vec![format!(
                "cycles_per_slot {cps} leaves no read cycle before {PROCESSING_CYCLES} processing cycles"
            )],
            max_fifo_occupancy: 0,
            weight_reads: 0,
            input_reads: 0,
        });
        return Ok(report);
    }

    let params = mem.params;
    let t_wr = period_fs(1.0 / params.wr_clk_hz);
    let t_rd = period_fs(clocks.rd_period_s);
    let burst = params.burst_len as u64;
    let reqs = map.requests_per_tile;
    let bpt = params.beats_per_tile(sched.tile);
    let read_latency = params.read_latency;
    let slots = sched.slots_per_pass;
    let total_tiles = sched.passes * slots;
    let load_cycle = (cps - PROCESSING_CYCLES - 1) as i64;

    // Slot 0 loads as soon as tile 0 is visible; the initial fill is not counted.
    let first_capture = ((reqs as u64 - 1) * burst + read_latency + burst) as i64 * t_wr;
    let first_load = first_capture + SYNC_STAGES * t_rd;
    let rd_origin = first_load - load_cycle * t_rd;
    let rd_cycle_at = |t: i64| ((t - rd_origin) / t_rd) as u64;

    let mut ctl = Controller {
        bufs: (0..map.channels).map(|_| DprBuf::new(bpt)).collect(),
        mem,
        in_flight: VecDeque::new(),
        dequeued_at: vec![None; total_tiles],
        blocked_issue: None,
        faults: Vec::new(),
        max_occupancy: 0,
    };
    for ch in &mut ctl.mem.channels {
        ch.select_page(0)?;
    }

    let mut queue: BinaryHeap<Reverse<(i64, Event)>> = BinaryHeap::new();
    queue.push(Reverse((0, Event::Issue { tile: 0, wr_cycle: 0 })));
    queue.push(Reverse((first_load, Event::Load { tile: 0 })));

    let mut stall_cycles = 0u64;
    let mut stall_this_slot = 0u64;
    let mut violations: Vec<String> = Vec::new();
    let mut aborted = false;

    while let Some(Reverse((now, event))) = queue.pop() {
        match event {
            Event::Issue { tile, wr_cycle } => {
                let (pass, slot) = (tile / slots, tile % slots);
                let mut beats: Vec<Vec<Vec<i16>>> = vec![Vec::with_capacity(map.channels); bpt];
                for ch in ctl.mem.channels.iter_mut() {
                    ch.select_page(pass)?;
                }
                for pe in 0..map.channels {
                    let loc = map.locate(pass, slot, pe);
                    for (j, &addr) in loc.addrs.iter().enumerate() {
                        let req_cycle = wr_cycle + j as u64 * burst;
                        let b = ctl.mem.channels[loc.channel].issue_read(addr, req_cycle)?;
                        ctl.mem.trace.record(ReadEvent {
                            source: ReadSource::Weights { channel: loc.channel },
                            page: b.page,
                            address: addr,
                            cycle: req_cycle,
                        });
                        for (i, beat) in b.beats.into_iter().enumerate() {
                            beats[j * params.burst_len + i].push(beat.words);
                        }
                    }
                }
                for (i, beat) in beats.into_iter().enumerate() {
                    let j = i / params.burst_len;
                    let beat_cycle = wr_cycle + j as u64 * burst + read_latency + (i % params.burst_len) as u64;
                    ctl.in_flight.push_back(beat);
                    queue.push(Reverse(((beat_cycle as i64 + 1) * t_wr, Event::Capture)));
                }
                let next = tile + 1;
                if next < total_tiles {
                    let bus_free = wr_cycle + reqs as u64 * burst;
                    match credit_edge(&ctl.dequeued_at, next, t_wr) {
                        Some(edge) => {
                            let c = bus_free.max(edge);
                            queue.push(Reverse((c as i64 * t_wr, Event::Issue { tile: next, wr_cycle: c })));
                        }
                        None => ctl.blocked_issue = Some((next, bus_free)),
                    }
                }
            }
            Event::Capture => {
                let beat = ctl.in_flight.pop_front().expect("capture without beat in flight");
                let visible = now + SYNC_STAGES * t_rd;
                for (buf, words) in ctl.bufs.iter_mut().zip(beat) {
                    if let Err(f) = buf.push_beat_at(words, visible) {
                        if ctl.faults.len() < MAX_VIOLATIONS {
                            ctl.faults.push(f);
                        }
                    }
                }
                ctl.max_occupancy = ctl.max_occupancy.max(ctl.bufs[0].occupancy());
            }
            Event::Load { tile } => {
                let (pass, slot) = (tile / slots, tile % slots);
                if !ctl.bufs.iter().all(|b| b.is_ready_at(now)) {
                    if stall_this_slot == 0 && violations.len() < MAX_VIOLATIONS {
                        violations.push(format!(
                            "weight starvation at pass {pass} slot {slot} (rd cycle {}): tile not in DPR-BUF when its read cycle began",
                            rd_cycle_at(now)
                        ));
                    }
                    stall_cycles += 1;
                    stall_this_slot += 1;
                    if stall_this_slot > MAX_STALL_PER_SLOT {
                        violations.push(format!("slot {slot} of pass {pass} never received its tile"));
                        aborted = true;
                        break;
                    }
                    queue.push(Reverse((now + t_rd, Event::Load { tile })));
                    continue;
                }
                stall_this_slot = 0;
                let mut tiles: Vec<Vec<i16>> = Vec::with_capacity(ctl.bufs.len());
                for buf in &mut ctl.bufs {
                    match buf.load_buffer() {
                        Ok(words) => tiles.push(words.to_vec()),
                        Err(f) => ctl.faults.push(f),
                    }
                }
                let rd_cycle = rd_cycle_at(now);
                let x = ctl.mem.input.read_slot_raw(slot)?.to_vec();
                ctl.mem.trace.record(ReadEvent {
                    source: ReadSource::Input,
                    page: pass,
                    address: slot,
                    cycle: rd_cycle,
                });
                if let Some(s) = sink.as_deref_mut() {
                    let refs: Vec<&[i16]> = tiles.iter().map(Vec::as_slice).collect();
                    s.consume_slot(pass, slot, &refs, &x);
                    if slot + 1 == slots {
                        s.end_pass(pass);
                    }
                }
                ctl.dequeued_at[tile] = Some(now);
                if let Some((blocked, bus_free)) = ctl.blocked_issue {
                    if let Some(edge) = credit_edge(&ctl.dequeued_at, blocked, t_wr) {
                        let c = bus_free.max(edge);
                        queue.push(Reverse((c as i64 * t_wr, Event::Issue { tile: blocked, wr_cycle: c })));
                        ctl.blocked_issue = None;
                    }
                }
                if tile + 1 < total_tiles {
                    queue.push(Reverse((now + cps as i64 * t_rd, Event::Load { tile: tile + 1 })));
                }
            }
        }
    }

    let actual_cycles = if aborted { 0 } else { sched.total_cycles() + stall_cycles };
    let weight_reads = ctl.mem.trace.events().iter().filter(|e| matches!(e.source, ReadSource::Weights { .. })).count();
    let input_reads = ctl.mem.trace.events().iter().filter(|e| e.source == ReadSource::Input).count();
    report.feasibility = Some(Feasibility {
        feasible: violations.is_empty() && ctl.faults.is_empty() && !aborted,
        actual_cycles,
        stall_cycles,
        fifo_faults: ctl.faults,
        violations,
        max_fifo_occupancy: ctl.max_occupancy,
        weight_reads,
        input_reads,
    });
    Ok(report)
}

/// Earliest wr cycle at which tile `next` may be requested: the FIFOs have
/// room once tile `next - depth` has been read and that read has crossed
/// back into the write domain.
fn credit_edge(dequeued_at: &[Option<i64>], next: usize, t_wr: i64) -> Option<u64> {
    if next < FIFO_DEPTH {
        return Some(0);
    }
    dequeued_at[next - FIFO_DEPTH].map(|t| {
        let visible = t + SYNC_STAGES * t_wr;
        (visible + t_wr - 1).div_euclid(t_wr).max(0) as u64
    })
}
