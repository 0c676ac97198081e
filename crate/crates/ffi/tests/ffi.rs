use std::ffi::CStr;
use std::ptr;

use wittenlab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(wl_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn gaussian_round_trip() {
    unsafe {
        let mut sys = ptr::null_mut();
        assert_eq!(wl_system_new_gaussian(2, 6.0, 33, &mut sys), WlStatus::Ok);
        assert!(!sys.is_null());
        let mut n = 0usize;
        assert_eq!(wl_system_num_sites(sys, &mut n), WlStatus::Ok);
        assert_eq!(n, 2);
        let (mut v, mut e) = (0.0, 0.0);
        assert_eq!(wl_covariance_coordinates(sys, 0, 0, 1e-10, &mut v, &mut e), WlStatus::Ok);
        assert!((v - 1.0).abs() < 1e-2 && e >= 0.0);
        assert_eq!(wl_covariance_coordinates(sys, 0, 1, 1e-10, &mut v, ptr::null_mut()), WlStatus::Ok);
        assert!(v.abs() < 1e-3);
        let mut m = 1.0;
        assert_eq!(wl_gibbs_mean_coordinate(sys, 1, &mut m), WlStatus::Ok);
        assert!(m.abs() < 1e-12);
        let mut lz = 0.0;
        assert_eq!(wl_log_partition(sys, &mut lz), WlStatus::Ok);
        assert!((lz - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-4);
        let c = [1.0, 0.0];
        let mut th = 0.0;
        assert_eq!(wl_theta_derivative_linear(sys, c.as_ptr(), 2, 2, 0.0, 1e-10, &mut th), WlStatus::Ok);
        assert!((th - 1.0).abs() < 1e-3);
        assert!(last_error().is_empty());
        wl_system_free(sys);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut sys = ptr::null_mut();
        assert_eq!(wl_system_new_kac_chain(2, 0.05, 6.0, 17, &mut sys), WlStatus::Ok);
        let mut v = 0.0;
        assert_eq!(wl_covariance_coordinates(sys, 0, 5, 1e-8, &mut v, ptr::null_mut()), WlStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(wl_covariance_coordinates(ptr::null(), 0, 0, 1e-8, &mut v, ptr::null_mut()), WlStatus::NullPointer);
        assert_eq!(wl_covariance_coordinates(sys, 0, 0, 2.0, &mut v, ptr::null_mut()), WlStatus::InvalidArgument);
        assert_eq!(wl_log_partition(sys, ptr::null_mut()), WlStatus::NullPointer);
        let c = [1.0];
        assert_eq!(
            wl_theta_derivative_linear(sys, c.as_ptr(), 1, 2, 0.0, 1e-8, &mut v),
            WlStatus::InvalidArgument
        );
        wl_system_free(sys);
        wl_system_free(ptr::null_mut());
        let mut big = ptr::null_mut();
        assert_eq!(wl_system_new_gaussian(8, 6.0, 129, &mut big), WlStatus::Resource);
        assert!(big.is_null());
        assert_eq!(wl_system_new_gaussian(0, 6.0, 33, &mut big), WlStatus::InvalidArgument);
        let version = CStr::from_ptr(wl_version()).to_str().unwrap();
        assert_eq!(version, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/wittenlab.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["wl_system_new_gaussian", "wl_covariance_coordinates", "WL_STATUS_RESOURCE", "WlSystem"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).output() else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
