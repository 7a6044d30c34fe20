use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fcaccel::cli::{cmd_sweep, sweep_csv, SweepGrid};
use fcaccel::datapath::SlotConsumer;
use fcaccel::layer::TileCoord;
use fcaccel::memsys::HbmParams;
use fcaccel::{
    plan_schedule, simulate_analytic, simulate_detailed, tile_weights, ClockSpec, FixedWord, LayerConfig, LayerPreset,
    MemorySystem, QFormat, WeightMatrix,
};

const F: QFormat = QFormat::Q16_10;

#[test]
fn latency_scales_with_slots_and_period() {
    let base = LayerConfig::new(64, 256, 8).with_pe_count(4);
    let clocks = ClockSpec::exact(100e6, 500e6).unwrap();
    let r0 = simulate_analytic(&base, &plan_schedule(&base).unwrap(), &clocks);
    for k in 1..=6usize {
        let cfg = LayerConfig::new(64 * k, 256, 8).with_pe_count(4);
        for f in [50e6, 100e6, 250e6, 662e6] {
            let c = ClockSpec::exact(f, 500e6).unwrap();
            let r = simulate_analytic(&cfg, &plan_schedule(&cfg).unwrap(), &c);
            r.check_invariants().unwrap();
            let want = r0.latency_s * k as f64 * (100e6 / f);
            assert!((r.latency_s - want).abs() <= want * 1e-12, "k={k} f={f}");
        }
    }
}

#[test]
fn detailed_agrees_with_analytic_when_feasible() {
    let mut feasible = 0;
    let mut infeasible = 0;
    for (m, n) in [(40, 30), (128, 64), (200, 17)] {
        for tile in [8, 16] {
            for pe in [1, 2, 4] {
                for rd in [50e6, 100e6, 300e6, 662e6, 1e9, 2e9] {
                    let cfg = LayerConfig::new(m, n, tile).with_pe_count(pe);
                    let sched = plan_schedule(&cfg).unwrap();
                    let clocks = ClockSpec::exact(rd, 500e6).unwrap();
                    let mut mem = MemorySystem::timing_only(&cfg).unwrap();
                    let r = simulate_detailed(&cfg, &sched, &clocks, &mut mem, None).unwrap();
                    r.check_invariants().unwrap();
                    let f = r.feasibility.as_ref().unwrap();
                    if f.feasible {
                        feasible += 1;
                        assert_eq!(f.actual_cycles, r.total_cycles);
                        assert!(f.fifo_faults.is_empty());
                        mem.trace.verify_read_once(&mem.map).unwrap();
                    } else {
                        infeasible += 1;
                        assert!(!f.violations.is_empty());
                    }
                }
            }
        }
    }
    assert!(feasible > 0 && infeasible > 0, "grid should hit both verdicts");
}

#[test]
fn faster_rd_clock_never_turns_infeasible_into_feasible() {
    let cfg = LayerConfig::from_preset(LayerPreset::Fc7).with_pe_count(128);
    let sched = plan_schedule(&cfg).unwrap();
    let mut last = true;
    for rd in [100e6, 400e6, 662e6, 900e6, 1.5e9, 3e9] {
        let mut mem = MemorySystem::timing_only(&cfg).unwrap();
        let clocks = ClockSpec::exact(rd, 500e6).unwrap();
        let ok = simulate_detailed(&cfg, &sched, &clocks, &mut mem, None).unwrap().feasible().unwrap();
        assert!(last || !ok, "feasible again at {rd}");
        last = ok;
    }
    assert!(!last);
}

/// Compares every delivered tile with words read straight from the matrix.
struct CheckingSink<'a> {
    w: &'a WeightMatrix,
    tile: usize,
    pe_count: usize,
    slots: usize,
}

impl SlotConsumer for CheckingSink<'_> {
    fn consume_slot(&mut self, pass: usize, slot: usize, tiles: &[&[i16]], _x: &[i16]) {
        let t = self.tile;
        for (pe, got) in tiles.iter().enumerate() {
            let at = TileCoord { row: pass * self.pe_count + pe, col: slot };
            for i in 0..t {
                for j in 0..t {
                    let (r, c) = (at.row * t + i, at.col * t + j);
                    let want = if r < self.w.rows() && c < self.w.cols() { self.w.get(r, c).raw() } else { 0 };
                    assert_eq!(got[i * t + j], want, "tile {at:?} word ({i},{j})");
                }
            }
        }
        self.slots += 1;
    }

    fn end_pass(&mut self, _pass: usize) {}
}

#[test]
fn memory_path_delivers_tiles_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (m, n, tile, pe) in [(50, 70, 8, 3), (100, 33, 16, 1), (64, 64, 8, 8)] {
        let cfg = LayerConfig::new(m, n, tile).with_pe_count(pe);
        let w = WeightMatrix::from_fn(n, m, F, |_, _| rng.random());
        let x: Vec<FixedWord> = (0..m).map(|_| FixedWord::from_raw(rng.random(), F).unwrap()).collect();
        let grid = tile_weights(&w, &cfg).unwrap();
        let params = HbmParams { page_count: 8, ..HbmParams::for_tile(tile) };
        let mut mem = MemorySystem::load_with(&cfg, params, &grid, &x).unwrap();
        let sched = plan_schedule(&cfg).unwrap();
        let mut sink = CheckingSink { w: &w, tile, pe_count: pe, slots: 0 };
        let r = simulate_detailed(&cfg, &sched, &ClockSpec::exact(100e6, 500e6).unwrap(), &mut mem, Some(&mut sink))
            .unwrap();
        assert_eq!(r.feasible(), Some(true));
        assert_eq!(sink.slots as u64, sched.total_slots());
    }
}

#[test]
fn sweep_is_identical_across_thread_counts() {
    let grid = SweepGrid {
        custom: Some([512, 512]),
        tiles: vec![8, 16],
        pe_counts: vec![4, 16, 64],
        pipelined: vec![false, true],
        detailed: true,
        ..SweepGrid::default()
    };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| sweep_csv(&cmd_sweep(&grid)).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one.lines().count(), 1 + 12);
}
