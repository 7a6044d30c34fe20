//! Functional and timing simulator for an HBM-backed fully-connected-layer
//! accelerator built from 128 tile-wide processing elements.
//!
//! * [`fxnum`]: 16-bit Q-format words and exact 48-bit accumulation.
//! * [`layer`]: layer shapes, weight tiling and the column-row-column schedule.
//! * [`datapath`]: PE array, vector accumulator and bias/ReLU stage.
//! * [`memsys`]: per-row HBM channels, prefetch FIFOs and the input memory.
//! * [`timing`]: cycle counts, latency, GOPS and energy, analytic or event-driven.
//! * [`cli`]: file formats, generators and the experiments behind the `fcaccel` binary.

pub mod cli;
pub mod datapath;
pub mod fxnum;
pub mod layer;
pub mod memsys;
pub mod timing;

pub use datapath::{reference_real, reference_serial_fixed, run_inference, InferenceResult, PeArray};
pub use fxnum::{dequantize, quantize, requantize, FixedWord, QFormat, WideAcc};
pub use layer::{plan_schedule, tile_weights, LayerConfig, LayerPreset, Schedule, TileGrid, WeightMatrix};
pub use memsys::MemorySystem;
pub use timing::{peak_gops, simulate_analytic, simulate_detailed, Block, ClockSpec, PowerModel, SimReport};
