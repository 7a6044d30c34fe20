//! Weight and input memories.
//!
//! Each PE row has its own HBM channel. A tile is fetched with one or two
//! burst reads (`burst_len` beats of `dq_bits` each); the DPR-BUF writes
//! consecutive beats into consecutive FIFOs and, once every FIFO holds a
//! beat of the tile, reads all of them in one cycle into the wide tile
//! register. Only the column-read path of an open row is modelled: no
//! refresh, activation or bank conflicts.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::fxnum::{FixedWord, QFormat};
use crate::layer::{LayerConfig, TileGrid};

/// FIFOs per DPR-BUF.
pub const FIFO_COUNT: usize = 8;
/// Beats each FIFO can hold.
pub const FIFO_DEPTH: usize = 4;

pub const HBM_WR_CLK_HZ: f64 = 500e6;

const WORD_BITS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum FifoFault {
    #[error("FIFO {fifo} overflow (depth {depth})")]
    Overflow { fifo: usize, depth: usize },
    #[error("FIFO {fifo} dequeued while empty")]
    Underflow { fifo: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemError {
    #[error("invalid HBM parameters: {0}")]
    InvalidParams(String),
    #[error("channel {channel}: {needed} bytes needed on a page of {page_bytes} bytes")]
    CapacityExceeded { channel: usize, needed: usize, page_bytes: usize },
    #[error("channel {channel}: {passes} passes need more than {pages} pages")]
    NotEnoughPages { channel: usize, passes: usize, pages: usize },
    #[error("page {page} out of range (channel has {count} pages)")]
    PageOutOfRange { page: usize, count: usize },
    #[error("channel {channel}: address {addr} is not mapped on page {page}")]
    UnmappedAddress { channel: usize, page: usize, addr: usize },
    #[error("input slot {slot} out of range ({slots} slots)")]
    SlotOutOfRange { slot: usize, slots: usize },
    #[error("{0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Fifo(#[from] FifoFault),
}

/// Read-path parameters shared by every weight channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HbmParams {
    pub dq_bits: usize,
    pub burst_len: usize,
    /// Wr-domain cycles from read request to first beat.
    pub read_latency: u64,
    pub wr_clk_hz: f64,
    pub page_count: usize,
    pub page_bytes: usize,
}

impl HbmParams {
    /// 128-bit beats for 8x8 tiles, the full 1024-bit stack bus for 16x16.
    pub fn for_tile(tile: usize) -> Self {
        HbmParams {
            dq_bits: if tile == 16 { 1024 } else { 128 },
            burst_len: 4,
            read_latency: 6,
            wr_clk_hz: HBM_WR_CLK_HZ,
            page_count: 2,
            page_bytes: 1 << 30,
        }
    }

    pub fn words_per_beat(&self) -> usize {
        self.dq_bits / WORD_BITS
    }

    pub fn words_per_burst(&self) -> usize {
        self.words_per_beat() * self.burst_len
    }

    /// Read requests (column addresses) per tile.
    pub fn requests_per_tile(&self, tile: usize) -> usize {
        (tile * tile) / self.words_per_burst()
    }

    pub fn beats_per_tile(&self, tile: usize) -> usize {
        self.requests_per_tile(tile) * self.burst_len
    }

    pub fn validate(&self, tile: usize) -> Result<(), MemError> {
        let bad = |m: String| Err(MemError::InvalidParams(m));
        if self.dq_bits == 0 || !self.dq_bits.is_multiple_of(WORD_BITS) {
            return bad(format!("dq_bits {} is not a positive multiple of {WORD_BITS}", self.dq_bits));
        }
        if self.burst_len == 0 {
            return bad("burst_len must be positive".into());
        }
        if !(self.wr_clk_hz.is_finite() && self.wr_clk_hz > 0.0) {
            return bad(format!("wr_clk_hz must be positive (got {})", self.wr_clk_hz));
        }
        if self.page_count < 2 {
            return bad(format!("page_count must be at least 2 (got {})", self.page_count));
        }
        let tile_bits = tile * tile * WORD_BITS;
        if self.burst_len * self.dq_bits * 2 < tile_bits {
            return bad(format!(
                "two bursts of {}x{} bits cannot carry a {tile}x{tile} tile",
                self.burst_len, self.dq_bits
            ));
        }
        if !(tile * tile).is_multiple_of(self.words_per_burst()) {
            return bad(format!(
                "a {tile}x{tile} tile is not a whole number of {}-word bursts",
                self.words_per_burst()
            ));
        }
        if self.beats_per_tile(tile) > FIFO_COUNT {
            return bad(format!("{} beats per tile exceed {FIFO_COUNT} FIFOs", self.beats_per_tile(tile)));
        }
        Ok(())
    }
}

/// One `dq_bits`-wide transfer on the DQ bus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Beat {
    /// Empty when the channel models timing only.
    pub words: Vec<i16>,
    pub wr_cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Burst {
    pub page: usize,
    pub addr: usize,
    pub beats: Vec<Beat>,
}

#[derive(Debug, Clone, Default)]
struct Page {
    addrs: usize,
    words: Vec<i16>,
}

#[derive(Debug, Clone)]
pub struct HbmChannel {
    id: usize,
    params: HbmParams,
    active_page: usize,
    pages: Vec<Page>,
    payload: bool,
}

impl HbmChannel {
    /// With `payload == false` reads return beats without data.
    pub fn new(id: usize, params: HbmParams, payload: bool) -> Self {
        HbmChannel { id, params, active_page: 0, pages: vec![Page::default(); params.page_count], payload }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn params(&self) -> &HbmParams {
        &self.params
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn active_page(&self) -> usize {
        self.active_page
    }

    pub fn has_payload(&self) -> bool {
        self.payload
    }

    /// Zero-cost page switch.
    pub fn select_page(&mut self, page: usize) -> Result<(), MemError> {
        if page >= self.pages.len() {
            return Err(MemError::PageOutOfRange { page, count: self.pages.len() });
        }
        self.active_page = page;
        Ok(())
    }

    fn map_page(&mut self, page: usize, addrs: usize, words: Vec<i16>) -> Result<(), MemError> {
        let bytes = addrs * self.params.words_per_burst() * WORD_BITS / 8;
        if bytes > self.params.page_bytes {
            return Err(MemError::CapacityExceeded {
                channel: self.id,
                needed: bytes,
                page_bytes: self.params.page_bytes,
            });
        }
        let p = self.pages.get_mut(page).ok_or(MemError::PageOutOfRange { page, count: self.params.page_count })?;
        debug_assert!(words.is_empty() || words.len() == addrs * self.params.words_per_burst());
        *p = Page { addrs, words };
        Ok(())
    }

    /// One burst read of `addr` on the active page, requested at wr-domain
    /// cycle `request_cycle`. Beat `i` arrives at `request_cycle + R + i`.
    pub fn issue_read(&self, addr: usize, request_cycle: u64) -> Result<Burst, MemError> {
        let page = &self.pages[self.active_page];
        if addr >= page.addrs {
            return Err(MemError::UnmappedAddress { channel: self.id, page: self.active_page, addr });
        }
        let wpb = self.params.words_per_beat();
        let base = addr * self.params.words_per_burst();
        let first = request_cycle + self.params.read_latency;
        let beats = (0..self.params.burst_len)
            .map(|i| Beat {
                words: if self.payload {
                    page.words[base + i * wpb..base + (i + 1) * wpb].to_vec()
                } else {
                    Vec::new()
                },
                wr_cycle: first + i as u64,
            })
            .collect();
        Ok(Burst { page: self.active_page, addr, beats })
    }
}

/// Where each tile lives: channel `pe`, page `pass`, column addresses
/// `slot*k .. slot*k + k` for `k` requests per tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AddressMap {
    pub channels: usize,
    pub passes: usize,
    pub slots_per_pass: usize,
    pub requests_per_tile: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TileLocation {
    pub channel: usize,
    pub page: usize,
    pub addrs: Vec<usize>,
}

impl AddressMap {
    pub fn locate(&self, pass: usize, slot: usize, pe: usize) -> TileLocation {
        let k = self.requests_per_tile;
        TileLocation { channel: pe, page: pass, addrs: (slot * k..slot * k + k).collect() }
    }

    pub fn addrs_per_page(&self) -> usize {
        self.slots_per_pass * self.requests_per_tile
    }
}

/// Map a `rows_of_tiles x cols_of_tiles` grid onto `channels` without
/// writing any data.
pub fn reserve_layout(
    rows_of_tiles: usize,
    cols_of_tiles: usize,
    tile: usize,
    channels: &mut [HbmChannel],
) -> Result<AddressMap, MemError> {
    let p = channels.len();
    if p == 0 || !rows_of_tiles.is_multiple_of(p) {
        return Err(MemError::DimensionMismatch(format!(
            "{rows_of_tiles} tile rows cannot be spread over {p} channels"
        )));
    }
    let passes = rows_of_tiles / p;
    let params = channels[0].params;
    params.validate(tile)?;
    let map = AddressMap {
        channels: p,
        passes,
        slots_per_pass: cols_of_tiles,
        requests_per_tile: params.requests_per_tile(tile),
    };
    for ch in channels.iter_mut() {
        if passes > ch.page_count() {
            return Err(MemError::NotEnoughPages { channel: ch.id, passes, pages: ch.page_count() });
        }
        for page in 0..passes {
            ch.map_page(page, map.addrs_per_page(), Vec::new())?;
        }
    }
    Ok(map)
}

/// Store every tile of `grid` in its channel. Tile row `r` goes to channel
/// `r mod P`, page `r / P`, tiles of one row at consecutive addresses.
pub fn layout_weights(grid: &TileGrid, channels: &mut [HbmChannel]) -> Result<AddressMap, MemError> {
    let t = grid.tile_size();
    let map = reserve_layout(grid.rows_of_tiles(), grid.cols_of_tiles(), t, channels)?;
    for ch in channels.iter_mut().filter(|c| c.payload) {
        for pass in 0..map.passes {
            let row = pass * map.channels + ch.id;
            let mut words = Vec::with_capacity(grid.cols_of_tiles() * t * t);
            for col in 0..grid.cols_of_tiles() {
                words.extend_from_slice(grid.tile(crate::layer::TileCoord { row, col }));
            }
            ch.map_page(pass, map.addrs_per_page(), words)?;
        }
    }
    Ok(map)
}

/// HBM_IN: the input feature vector, zero padded to whole tiles. One
/// read returns the `T` features of a tile column.
#[derive(Debug, Clone)]
pub struct InputMemory {
    tile: usize,
    fmt: QFormat,
    words: Vec<i16>,
}

impl InputMemory {
    pub fn new(x: &[FixedWord], tile: usize, fmt: QFormat) -> Self {
        let padded = x.len().div_ceil(tile) * tile;
        let mut words: Vec<i16> = x.iter().map(|w| w.raw()).collect();
        words.resize(padded, 0);
        InputMemory { tile, fmt, words }
    }

    pub fn slots(&self) -> usize {
        self.words.len() / self.tile
    }

    pub fn read_slot_raw(&self, slot: usize) -> Result<&[i16], MemError> {
        if slot >= self.slots() {
            return Err(MemError::SlotOutOfRange { slot, slots: self.slots() });
        }
        Ok(&self.words[slot * self.tile..(slot + 1) * self.tile])
    }

    /// Features `T*slot .. T*slot + T`.
    pub fn read_input_slot(&self, slot: usize) -> Result<Vec<FixedWord>, MemError> {
        Ok(self.read_slot_raw(slot)?.iter().map(|&r| FixedWord::from_raw_unchecked(r, self.fmt)).collect())
    }
}

#[derive(Debug, Clone)]
struct FifoEntry {
    words: Vec<i16>,
    readable_at: i64,
}

/// Prefetch buffer: beat `i` of a tile goes into FIFO `i`; the tile
/// register is loaded from the heads of the first `beats_per_tile` FIFOs
/// in one read.
#[derive(Debug, Clone)]
pub struct DprBuf {
    fifos: Vec<VecDeque<FifoEntry>>,
    depth: usize,
    beats_per_tile: usize,
    next_fifo: usize,
    assembled: Option<Vec<i16>>,
}

impl DprBuf {
    pub fn new(beats_per_tile: usize) -> Self {
        Self::with_depth(beats_per_tile, FIFO_DEPTH)
    }

    pub fn with_depth(beats_per_tile: usize, depth: usize) -> Self {
        assert!((1..=FIFO_COUNT).contains(&beats_per_tile), "beats_per_tile out of range");
        DprBuf {
            fifos: vec![VecDeque::with_capacity(depth); FIFO_COUNT],
            depth,
            beats_per_tile,
            next_fifo: 0,
            assembled: None,
        }
    }

    pub fn beats_per_tile(&self) -> usize {
        self.beats_per_tile
    }

    /// Enqueue a beat that can be read immediately.
    pub fn push_beat(&mut self, beat: Beat) -> Result<(), FifoFault> {
        self.push_beat_at(beat.words, i64::MIN)
    }

    /// Enqueue a beat that becomes visible to the read side at `readable_at`.
    pub fn push_beat_at(&mut self, words: Vec<i16>, readable_at: i64) -> Result<(), FifoFault> {
        let fifo = &mut self.fifos[self.next_fifo];
        if fifo.len() >= self.depth {
            return Err(FifoFault::Overflow { fifo: self.next_fifo, depth: self.depth });
        }
        fifo.push_back(FifoEntry { words, readable_at });
        self.next_fifo = (self.next_fifo + 1) % self.beats_per_tile;
        Ok(())
    }

    /// Every FIFO of the tile holds a beat.
    pub fn is_ready(&self) -> bool {
        self.is_ready_at(i64::MAX)
    }

    pub fn is_ready_at(&self, now: i64) -> bool {
        self.fifos[..self.beats_per_tile].iter().all(|f| f.front().is_some_and(|e| e.readable_at <= now))
    }

    /// Beats enqueued but not yet read, summed over FIFOs.
    pub fn occupancy(&self) -> usize {
        self.fifos.iter().map(VecDeque::len).sum()
    }

    /// Read all tile FIFOs into the tile register. Fails without side
    /// effects if any FIFO is empty.
    pub fn load_buffer(&mut self) -> Result<&[i16], FifoFault> {
        if let Some(fifo) = self.fifos[..self.beats_per_tile].iter().position(VecDeque::is_empty) {
            return Err(FifoFault::Underflow { fifo });
        }
        let mut buf = Vec::new();
        for f in &mut self.fifos[..self.beats_per_tile] {
            buf.extend(f.pop_front().expect("checked non-empty").words);
        }
        Ok(self.assembled.insert(buf))
    }

    /// The tile register, once loaded.
    pub fn assembled(&self) -> Option<&[i16]> {
        self.assembled.as_deref()
    }
}

/// Push a whole tile's beats and load the tile register.
pub fn prefetch_slot(buf: &mut DprBuf, beats: impl IntoIterator<Item = Beat>) -> Result<Vec<i16>, MemError> {
    for beat in beats {
        buf.push_beat(beat)?;
    }
    Ok(buf.load_buffer()?.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadSource {
    Weights { channel: usize },
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReadEvent {
    pub source: ReadSource,
    pub page: usize,
    pub address: usize,
    /// Cycle in the reading domain: wr clock for weights, rd clock for inputs.
    pub cycle: u64,
}

/// Append-only record of memory reads.
#[derive(Debug, Clone, Default)]
pub struct MemTrace {
    events: Vec<ReadEvent>,
}

impl MemTrace {
    pub fn record(&mut self, event: ReadEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[ReadEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn read_counts(&self) -> HashMap<(ReadSource, usize, usize), usize> {
        let mut counts = HashMap::new();
        for e in &self.events {
            *counts.entry((e.source, e.page, e.address)).or_insert(0) += 1;
        }
        counts
    }

    /// Every mapped weight address read exactly once, and the input memory
    /// read exactly once per slot of every pass.
    pub fn verify_read_once(&self, map: &AddressMap) -> Result<(), Vec<String>> {
        let counts = self.read_counts();
        let mut problems = Vec::new();
        for channel in 0..map.channels {
            for page in 0..map.passes {
                for addr in 0..map.addrs_per_page() {
                    let n = counts.get(&(ReadSource::Weights { channel }, page, addr)).copied().unwrap_or(0);
                    if n != 1 {
                        problems.push(format!("channel {channel} page {page} addr {addr} read {n} times"));
                    }
                }
            }
        }
        let expected_weights = map.channels * map.passes * map.addrs_per_page();
        let weight_reads = self.events.iter().filter(|e| matches!(e.source, ReadSource::Weights { .. })).count();
        if weight_reads != expected_weights {
            problems.push(format!("{weight_reads} weight reads, expected {expected_weights}"));
        }
        let input_reads: Vec<_> = self.events.iter().filter(|e| e.source == ReadSource::Input).collect();
        if input_reads.len() != map.passes * map.slots_per_pass {
            problems.push(format!("{} input reads, expected {}", input_reads.len(), map.passes * map.slots_per_pass));
        }
        for page in 0..map.passes {
            for slot in 0..map.slots_per_pass {
                let n = counts.get(&(ReadSource::Input, page, slot)).copied().unwrap_or(0);
                if n != 1 {
                    problems.push(format!("input slot {slot} of pass {page} read {n} times"));
                }
            }
        }
        problems.truncate(32);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// All weight channels, their address map, HBM_IN and the read trace.
#[derive(Debug, Clone)]
pub struct MemorySystem {
    pub params: HbmParams,
    pub channels: Vec<HbmChannel>,
    pub map: AddressMap,
    pub input: InputMemory,
    pub trace: MemTrace,
    tile: usize,
}

impl MemorySystem {
    fn channels_for(cfg: &LayerConfig, params: HbmParams, payload: bool) -> Vec<HbmChannel> {
        let passes = cfg.rows_of_tiles() / cfg.pe_count;
        let params = HbmParams { page_count: params.page_count.max(passes), ..params };
        (0..cfg.pe_count).map(|id| HbmChannel::new(id, params, payload)).collect()
    }

    /// Channels loaded with `grid`, HBM_IN loaded with `x`.
    pub fn load(cfg: &LayerConfig, grid: &TileGrid, x: &[FixedWord]) -> Result<Self, MemError> {
        Self::load_with(cfg, HbmParams::for_tile(cfg.tile), grid, x)
    }

    pub fn load_with(cfg: &LayerConfig, params: HbmParams, grid: &TileGrid, x: &[FixedWord]) -> Result<Self, MemError> {
        if x.len() != cfg.in_features {
            return Err(MemError::DimensionMismatch(format!("input length {} != {}", x.len(), cfg.in_features)));
        }
        if grid.tile_size() != cfg.tile || grid.rows_of_tiles() != cfg.rows_of_tiles() {
            return Err(MemError::DimensionMismatch("tile grid does not match layer".into()));
        }
        let mut channels = Self::channels_for(cfg, params, true);
        let map = layout_weights(grid, &mut channels)?;
        Ok(MemorySystem {
            params: *channels[0].params(),
            channels,
            map,
            input: InputMemory::new(x, cfg.tile, cfg.fmt),
            trace: MemTrace::default(),
            tile: cfg.tile,
        })
    }

    /// Address map and timing without stored data: beats carry no words.
    pub fn timing_only(cfg: &LayerConfig) -> Result<Self, MemError> {
        Self::timing_only_with(cfg, HbmParams::for_tile(cfg.tile))
    }

    pub fn timing_only_with(cfg: &LayerConfig, params: HbmParams) -> Result<Self, MemError> {
        let mut channels = Self::channels_for(cfg, params, false);
        let map = reserve_layout(cfg.rows_of_tiles(), cfg.cols_of_tiles(), cfg.tile, &mut channels)?;
        Ok(MemorySystem {
            params: *channels[0].params(),
            channels,
            map,
            input: InputMemory::new(&vec![FixedWord::zero(cfg.fmt); cfg.in_features], cfg.tile, cfg.fmt),
            trace: MemTrace::default(),
            tile: cfg.tile,
        })
    }

    pub fn tile(&self) -> usize {
        self.tile
    }

    pub fn has_payload(&self) -> bool {
        self.channels.first().is_some_and(HbmChannel::has_payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{tile_weights, LayerPreset, TileCoord, WeightMatrix};

    fn grid_for(cfg: &LayerConfig) -> TileGrid {
        let w = WeightMatrix::from_fn(cfg.out_features, cfg.in_features, cfg.fmt, |r, c| (r * 1000 + c) as i16 | 1);
        tile_weights(&w, cfg).unwrap()
    }

    #[test]
    fn burst_timing() {
        let mut ch = HbmChannel::new(0, HbmParams::for_tile(8), true);
        ch.map_page(0, 2, (0..64).collect()).unwrap();
        let a = ch.issue_read(0, 0).unwrap();
        assert_eq!(a.beats.iter().map(|b| b.wr_cycle).collect::<Vec<_>>(), vec![6, 7, 8, 9]);
        assert_eq!(a.beats[1].words, (8..16).collect::<Vec<i16>>());
        // Cb issued one burst later continues seamlessly
        let b = ch.issue_read(1, 4).unwrap();
        let cycles: Vec<_> = a.beats.iter().chain(&b.beats).map(|b| b.wr_cycle).collect();
        assert_eq!(cycles, (6..14).collect::<Vec<_>>());
        assert!(matches!(ch.issue_read(2, 0), Err(MemError::UnmappedAddress { addr: 2, .. })));
    }

    #[test]
    fn zero_padded_tile_reads_zero_beats() {
        let cfg = LayerConfig::new(8, 3, 8).with_pe_count(1);
        let w = WeightMatrix::zeros(3, 8, cfg.fmt);
        let mut chans = vec![HbmChannel::new(0, HbmParams::for_tile(8), true)];
        layout_weights(&tile_weights(&w, &cfg).unwrap(), &mut chans).unwrap();
        let burst = chans[0].issue_read(1, 0).unwrap();
        assert_eq!(burst.beats.len(), 4);
        assert!(burst.beats.iter().all(|b| b.words == vec![0; 8]));
    }

    #[test]
    fn params_per_tile() {
        let p8 = HbmParams::for_tile(8);
        assert_eq!((p8.requests_per_tile(8), p8.beats_per_tile(8)), (2, 8));
        let p16 = HbmParams::for_tile(16);
        assert_eq!((p16.requests_per_tile(16), p16.beats_per_tile(16)), (1, 4));
        assert!(p8.validate(16).is_err());
        assert!(HbmParams { page_count: 1, ..p8 }.validate(8).is_err());
    }

    #[test]
    fn fc8_layout() {
        let cfg = LayerConfig::from_preset(LayerPreset::Fc8Alex);
        let mut chans: Vec<_> = (0..128).map(|i| HbmChannel::new(i, HbmParams::for_tile(8), false)).collect();
        let map = reserve_layout(cfg.rows_of_tiles(), cfg.cols_of_tiles(), 8, &mut chans).unwrap();
        assert_eq!(map.passes, 1);
        assert_eq!(map.addrs_per_page(), 1024);
        assert_eq!(map.locate(0, 511, 127), TileLocation { channel: 127, page: 0, addrs: vec![1022, 1023] });
    }

    #[test]
    fn fc6_vgg_uses_two_pages() {
        let cfg = LayerConfig::from_preset(LayerPreset::Fc6Vgg);
        let mut chans: Vec<_> = (0..128).map(|i| HbmChannel::new(i, HbmParams::for_tile(16), false)).collect();
        let map = reserve_layout(cfg.rows_of_tiles(), cfg.cols_of_tiles(), 16, &mut chans).unwrap();
        assert_eq!(map.passes, 2);
        assert_eq!(map.locate(1, 3, 5).page, 1);
        assert_eq!(map.locate(1, 3, 5).addrs, vec![3]);
    }

    #[test]
    fn single_tile_layout() {
        let cfg = LayerConfig::new(8, 8, 8).with_pe_count(1);
        let grid = grid_for(&cfg);
        let mut chans = vec![HbmChannel::new(0, HbmParams::for_tile(8), true)];
        let map = layout_weights(&grid, &mut chans).unwrap();
        assert_eq!(map.locate(0, 0, 0), TileLocation { channel: 0, page: 0, addrs: vec![0, 1] });
    }

    #[test]
    fn capacity_and_pages() {
        let cfg = LayerConfig::new(64, 8, 8).with_pe_count(1);
        let grid = grid_for(&cfg);
        let small = HbmParams { page_bytes: 64, ..HbmParams::for_tile(8) };
        let mut chans = vec![HbmChannel::new(0, small, true)];
        assert!(matches!(layout_weights(&grid, &mut chans), Err(MemError::CapacityExceeded { .. })));

        let cfg = LayerConfig::new(8, 24, 8).with_pe_count(1);
        let mut chans = vec![HbmChannel::new(0, HbmParams::for_tile(8), true)];
        assert!(matches!(layout_weights(&grid_for(&cfg), &mut chans), Err(MemError::NotEnoughPages { .. })));
    }

    #[test]
    fn page_selection() {
        let cfg = LayerConfig::new(8, 32, 16).with_pe_count(1);
        let grid = grid_for(&cfg);
        let mut chans = vec![HbmChannel::new(0, HbmParams::for_tile(16), true)];
        let map = layout_weights(&grid, &mut chans).unwrap();
        assert_eq!(map.passes, 2);
        let ch = &mut chans[0];
        let pass1 = ch.issue_read(0, 0).unwrap();
        ch.select_page(1).unwrap();
        ch.select_page(1).unwrap();
        let pass2 = ch.issue_read(0, 0).unwrap();
        let words = |b: &Burst| b.beats.iter().flat_map(|x| x.words.clone()).collect::<Vec<_>>();
        assert_eq!(words(&pass1), grid.tile(TileCoord { row: 0, col: 0 }));
        assert_eq!(words(&pass2), grid.tile(TileCoord { row: 1, col: 0 }));
        assert!(matches!(ch.select_page(5), Err(MemError::PageOutOfRange { page: 5, count: 2 })));
        assert_eq!(ch.active_page(), 1);
    }

    #[test]
    fn dpr_buf_assembles_in_beat_order() {
        let mut buf = DprBuf::new(8);
        let beats: Vec<Beat> = (0..8).map(|i| Beat { words: vec![i as i16 * 10; 8], wr_cycle: i }).collect();
        for b in beats.iter().take(7).cloned() {
            buf.push_beat(b).unwrap();
        }
        assert!(!buf.is_ready());
        assert_eq!(buf.load_buffer(), Err(FifoFault::Underflow { fifo: 7 }));
        assert_eq!(buf.occupancy(), 7);
        buf.push_beat(beats[7].clone()).unwrap();
        assert!(buf.is_ready());
        let expect: Vec<i16> = beats.iter().flat_map(|b| b.words.clone()).collect();
        assert_eq!(buf.load_buffer().unwrap(), expect.as_slice());
        assert_eq!(buf.assembled(), Some(expect.as_slice()));
        assert_eq!(buf.occupancy(), 0);
    }

    #[test]
    fn dpr_buf_overflow() {
        let mut buf = DprBuf::new(8);
        for _ in 0..FIFO_DEPTH * 8 {
            buf.push_beat(Beat { words: vec![], wr_cycle: 0 }).unwrap();
        }
        assert_eq!(buf.push_beat(Beat { words: vec![], wr_cycle: 0 }), Err(FifoFault::Overflow { fifo: 0, depth: 4 }));
    }

    #[test]
    fn dpr_buf_respects_visibility_time() {
        let mut buf = DprBuf::new(4);
        for i in 0..4 {
            buf.push_beat_at(vec![i], 100 + i as i64).unwrap();
        }
        assert!(!buf.is_ready_at(102));
        assert!(buf.is_ready_at(103));
    }

    #[test]
    fn input_slots() {
        let fmt = QFormat::Q16_10;
        let x: Vec<FixedWord> = (0..4096).map(|i| FixedWord::from_raw((i % 3000) as i16, fmt).unwrap()).collect();
        let hbm_in = InputMemory::new(&x, 8, fmt);
        assert_eq!(hbm_in.read_input_slot(0).unwrap(), x[0..8].to_vec());
        assert_eq!(hbm_in.read_input_slot(511).unwrap(), x[4088..4096].to_vec());
        assert!(matches!(hbm_in.read_input_slot(512), Err(MemError::SlotOutOfRange { .. })));
        let wide = InputMemory::new(&x, 16, fmt);
        assert_eq!(wide.read_input_slot(3).unwrap(), x[48..64].to_vec());
        let ragged = InputMemory::new(&x[..10], 8, fmt);
        assert_eq!(ragged.read_slot_raw(1).unwrap(), &[8, 9, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn address_map_is_injective() {
        let map = AddressMap { channels: 3, passes: 2, slots_per_pass: 5, requests_per_tile: 2 };
        let mut seen = std::collections::HashSet::new();
        for pass in 0..2 {
            for slot in 0..5 {
                for pe in 0..3 {
                    let loc = map.locate(pass, slot, pe);
                    for a in loc.addrs {
                        assert!(seen.insert((loc.channel, loc.page, a)));
                    }
                }
            }
        }
    }
}
