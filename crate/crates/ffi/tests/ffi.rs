use std::ffi::{CStr, CString};
use std::ptr;

use u2former_ffi::*;

fn last_error() -> String {
    let p = u2f_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(c: usize) -> *mut U2fModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { u2f_model_new(c, 3, &mut m) }, U2fStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn restore_through_the_c_abi() {
    let m = new_model(4);
    let (h, w) = (20, 27);
    let n = 3 * h * w;
    let input: Vec<f32> = (0..n).map(|i| (i % 97) as f32 / 96.0).collect();
    let (mut b, mut r) = (vec![-1.0f32; n], vec![-1.0f32; n]);
    let s = unsafe { u2f_model_restore(m, input.as_ptr(), h, w, b.as_mut_ptr(), r.as_mut_ptr()) };
    assert_eq!(s, U2fStatus::Ok);
    assert!(b.iter().chain(&r).all(|v| (0.0..=1.0).contains(v)));
    assert!(unsafe { u2f_model_num_params(m) } > 0);
    unsafe { u2f_model_free(m) };
}

#[test]
fn errors_set_status_and_message() {
    u2f_clear_error();
    assert!(u2f_last_error().is_null());
    let m = new_model(4);
    let bad = vec![2.0f32; 3 * 16 * 16];
    let mut out = vec![0.0f32; bad.len()];
    let s = unsafe { u2f_model_restore(m, bad.as_ptr(), 16, 16, out.as_mut_ptr(), out.as_mut_ptr()) };
    assert_eq!(s, U2fStatus::InvalidArgument);
    assert!(last_error().contains("[0, 1]"));
    let s = unsafe { u2f_model_restore(m, ptr::null(), 16, 16, out.as_mut_ptr(), out.as_mut_ptr()) };
    assert_eq!(s, U2fStatus::NullPointer);
    assert_eq!(unsafe { u2f_model_restore(ptr::null(), bad.as_ptr(), 16, 16, out.as_mut_ptr(), out.as_mut_ptr()) }, U2fStatus::NullPointer);
    let mut f = U2fFlops::default();
    assert_eq!(unsafe { u2f_block_flops(8, 16, 16, 4, 2, 1.5, &mut f) }, U2fStatus::InvalidArgument);
    assert_eq!(unsafe { u2f_block_flops(8, 18, 16, 4, 2, 0.5, &mut f) }, U2fStatus::ShapeMismatch);
    unsafe { u2f_model_free(m) };
    unsafe { u2f_model_free(ptr::null_mut()) };
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let a = CString::new(dir.path().join("a.u2f").to_str().unwrap()).unwrap();
    let b = CString::new(dir.path().join("b.u2f").to_str().unwrap()).unwrap();
    let m = new_model(4);
    assert_eq!(unsafe { u2f_model_save(m, a.as_ptr()) }, U2fStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { u2f_model_load(a.as_ptr(), &mut loaded) }, U2fStatus::Ok);
    assert_eq!(unsafe { u2f_model_save(loaded, b.as_ptr()) }, U2fStatus::Ok);
    let (ba, bb) = (std::fs::read(dir.path().join("a.u2f")).unwrap(), std::fs::read(dir.path().join("b.u2f")).unwrap());
    assert_eq!(ba, bb);
    std::fs::write(dir.path().join("a.u2f"), &ba[..ba.len() - 9]).unwrap();
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { u2f_model_load(a.as_ptr(), &mut bad) }, U2fStatus::CorruptCheckpoint);
    assert!(bad.is_null());
    let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { u2f_model_load(missing.as_ptr(), &mut bad) }, U2fStatus::Io);
    unsafe {
        u2f_model_free(m);
        u2f_model_free(loaded);
    }
}

#[test]
fn metrics_and_synthesis() {
    let size = 24;
    let n = 3 * size * size;
    let (mut i, mut t, mut r) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let s = unsafe { u2f_synth_sample(U2fKind::Rain, size, 5, i.as_mut_ptr(), t.as_mut_ptr(), r.as_mut_ptr()) };
    assert_eq!(s, U2fStatus::Ok);
    for k in 0..n {
        assert!((i[k] - (t[k] + r[k]).min(1.0)).abs() < 1e-6);
    }
    let mut v = 0.0;
    assert_eq!(unsafe { u2f_ssim(t.as_ptr(), t.as_ptr(), size, size, &mut v) }, U2fStatus::Ok);
    assert!((v - 1.0).abs() < 1e-9);
    let shifted: Vec<f32> = (0..n).map(|k| if k % 2 == 0 { 0.25 } else { 0.5 }).collect();
    let plus: Vec<f32> = shifted.iter().map(|x| x + 0.1).collect();
    assert_eq!(unsafe { u2f_psnr(shifted.as_ptr(), plus.as_ptr(), size, size, &mut v) }, U2fStatus::Ok);
    assert!((v - 20.0).abs() < 1e-4, "{v}");
    let mut f = U2fFlops::default();
    assert_eq!(unsafe { u2f_block_flops(32, 8, 8, 8, 1, 1.0, &mut f) }, U2fStatus::Ok);
    assert_eq!((f.qkv_proj, f.attn_matrix, f.attn_apply, f.out_proj), (196608, 131072, 131072, 65536));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/u2former.h")).unwrap();
    for name in ["u2f_last_error", "u2f_model_new", "u2f_model_load", "u2f_model_restore", "u2f_model_free", "U2fStatus", "U2fFlops", "U2F_STATUS_CORRUPT_CHECKPOINT"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
