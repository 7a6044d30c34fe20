use std::ffi::{c_char, CStr};
use std::ptr;

use fcaccel_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe {
        fca_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn preset(name: &CStr) -> *mut FcaLayer {
    let mut layer = ptr::null_mut();
    assert_eq!(unsafe { fca_layer_new_preset(name.as_ptr(), &mut layer) }, FcaStatus::Ok);
    layer
}

fn summary(layer: *const FcaLayer, mode: FcaMode, rd_clk_hz: f64) -> FcaSummary {
    let mut report = ptr::null_mut();
    let mut s = FcaSummary::default();
    unsafe {
        assert_eq!(fca_simulate(layer, mode, rd_clk_hz, &mut report), FcaStatus::Ok, "{}", last_error());
        assert_eq!(fca_report_summary(report, &mut s), FcaStatus::Ok);
        fca_report_free(report);
    }
    s
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(fca_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn fc8_reports_through_the_abi() {
    let layer = preset(c"fc8-alex");
    let s = summary(layer, FcaMode::Analytic, 0.0);
    assert_eq!(s.total_cycles, 5632);
    assert!((s.latency_s - 56.32e-6).abs() < 1e-12);
    assert_eq!(s.feasible, -1);
    assert!((s.energy_j - 17.2 * 56.32e-6).abs() < 1e-12);

    let mut gops = 0.0;
    assert_eq!(unsafe { fca_peak_gops(layer, FcaBlock::MvMult, &mut gops) }, FcaStatus::Ok);
    assert!((gops - 1536.0).abs() < 1e-9);
    unsafe { fca_layer_free(layer) };

    let mut layer = ptr::null_mut();
    assert_eq!(unsafe { fca_layer_new_custom(4096, 1000, 8, 128, true, &mut layer) }, FcaStatus::Ok);
    let ok = summary(layer, FcaMode::Detailed, 0.0);
    assert_eq!((ok.feasible, ok.total_cycles, ok.fifo_faults), (1, 5632, 0));
    let fast = summary(layer, FcaMode::Detailed, 2e9);
    assert_eq!(fast.feasible, 0);
    unsafe { fca_layer_free(layer) };
}

#[test]
fn report_json_respects_buffer_size() {
    let layer = preset(c"fc7");
    let mut report = ptr::null_mut();
    let mut needed = 0usize;
    unsafe {
        assert_eq!(fca_simulate(layer, FcaMode::Analytic, 0.0, &mut report), FcaStatus::Ok);
        assert_eq!(fca_report_json(report, ptr::null_mut(), 0, &mut needed), FcaStatus::BufferTooSmall);
        let mut buf = vec![0 as c_char; needed + 1];
        assert_eq!(fca_report_json(report, buf.as_mut_ptr(), buf.len(), ptr::null_mut()), FcaStatus::Ok);
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        let v: serde_json::Value = serde_json::from_str(text).unwrap();
        assert_eq!(v["total_cycles"], 3584);
        assert_eq!(v["passes"], 2);
        fca_report_free(report);
        fca_layer_free(layer);
    }
}

#[test]
fn errors_are_codes_with_messages() {
    let mut layer = ptr::null_mut();
    unsafe {
        assert_eq!(fca_layer_new_preset(c"fc9".as_ptr(), &mut layer), FcaStatus::InvalidArgument);
        assert!(layer.is_null());
        assert_eq!(fca_layer_new_custom(10, 10, 12, 4, false, &mut layer), FcaStatus::InvalidConfig);
        assert!(last_error().contains("tile size must be 8 or 16"), "{}", last_error());
        assert_eq!(fca_layer_new_preset(ptr::null(), &mut layer), FcaStatus::NullPointer);
        let mut w = 0i16;
        assert_eq!(fca_quantize(1.0, 16, &mut w), FcaStatus::InvalidArgument);
        assert_eq!(fca_requantize(1 << 50, 10, &mut w), FcaStatus::InvalidArgument);
        assert_eq!(fca_quantize(f64::NAN, 10, &mut w), FcaStatus::InvalidArgument);
        // success clears the message
        assert_eq!(fca_quantize(1.0, 10, &mut w), FcaStatus::Ok);
        assert_eq!(fca_last_error_message(ptr::null_mut(), 0), 0);
        fca_layer_free(ptr::null_mut());
        fca_report_free(ptr::null_mut());
    }
}

#[test]
fn scalar_arithmetic() {
    let mut w = 0i16;
    unsafe {
        assert_eq!(fca_quantize(1.0, 10, &mut w), FcaStatus::Ok);
        assert_eq!(w, 1024);
        assert_eq!(fca_quantize(40.0, 10, &mut w), FcaStatus::Ok);
        assert_eq!(w, i16::MAX);
        assert_eq!(fca_requantize(1536, 10, &mut w), FcaStatus::Ok);
        assert_eq!(w, 2);
        assert_eq!(fca_requantize(2560, 10, &mut w), FcaStatus::Ok);
        assert_eq!(w, 2);
    }
}

#[test]
fn inference_matches_serial_reference() {
    let (m, n) = (37usize, 21usize);
    let mut layer = ptr::null_mut();
    let mut s = 1u64;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 48) as i16 >> 4
    };
    let w: Vec<i16> = (0..n * m).map(|_| next()).collect();
    let x: Vec<i16> = (0..m).map(|_| next()).collect();
    let b: Vec<i16> = (0..n).map(|_| next()).collect();
    let mut tiled = vec![0i16; n];
    let mut serial = vec![0i16; n];
    unsafe {
        assert_eq!(fca_layer_new_custom(m, n, 16, 2, false, &mut layer), FcaStatus::Ok);
        assert_eq!(fca_layer_set_bias(layer, b.as_ptr(), n), FcaStatus::Ok);
        assert_eq!(fca_layer_set_bias(layer, b.as_ptr(), n - 1), FcaStatus::InvalidArgument);
        assert_eq!(fca_run_inference(layer, w.as_ptr(), x.as_ptr(), tiled.as_mut_ptr(), n), FcaStatus::Ok);
        assert_eq!(fca_reference_serial(layer, w.as_ptr(), x.as_ptr(), serial.as_mut_ptr(), n), FcaStatus::Ok);
        assert_eq!(
            fca_run_inference(layer, w.as_ptr(), x.as_ptr(), tiled.as_mut_ptr(), n - 1),
            FcaStatus::BufferTooSmall
        );
        assert_eq!(fca_run_inference(layer, ptr::null(), x.as_ptr(), tiled.as_mut_ptr(), n), FcaStatus::NullPointer);
        fca_layer_free(layer);
    }
    assert_eq!(tiled, serial);
    assert!(tiled.iter().all(|&v| v >= 0));
    assert!(tiled.iter().any(|&v| v > 0));
}
