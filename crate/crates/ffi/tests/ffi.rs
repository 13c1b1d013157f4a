use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use normshape::vae::{VaeConfig, VaeParams};
use normshape_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ns_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn ball(dims: [usize; 3], r: f64) -> Vec<u8> {
    let mut v = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let c = |i: usize, n: usize| i as f64 - (n as f64 - 1.0) / 2.0;
                let d2 = c(x, dims[0]).powi(2) + c(y, dims[1]).powi(2) + c(z, dims[2]).powi(2);
                v.push(u8::from(d2 <= r * r));
            }
        }
    }
    v
}

unsafe fn new_mask(dims: [usize; 3], voxels: &[u8]) -> *mut NsMask {
    let mut m = ptr::null_mut();
    let s = ns_mask_new(
        dims.as_ptr(),
        [1.0, 1.0, 2.0].as_ptr(),
        voxels.as_ptr(),
        voxels.len(),
        &mut m,
    );
    assert_eq!(s, NsStatus::Ok, "{}", last_error());
    m
}

#[test]
fn mask_roundtrip_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.mvol").to_str().unwrap()).unwrap();
    let dims = [9, 7, 5];
    let vox = ball(dims, 2.5);
    unsafe {
        let m = new_mask(dims, &vox);
        assert_eq!(ns_mask_save(m, path.as_ptr()), NsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ns_mask_load(path.as_ptr(), &mut back), NsStatus::Ok);
        let mut d = [0usize; 3];
        assert_eq!(ns_mask_dims(back, d.as_mut_ptr()), NsStatus::Ok);
        assert_eq!(d, dims);
        let mut dice = 0.0;
        assert_eq!(ns_dice(m, back, &mut dice), NsStatus::Ok);
        assert_eq!(dice, 1.0);
        let mut vol = 0.0;
        assert_eq!(ns_mask_volume_mm3(m, &mut vol), NsStatus::Ok);
        assert_eq!(vol, 2.0 * vox.iter().map(|&v| f64::from(v)).sum::<f64>());
        ns_mask_free(m);
        ns_mask_free(back);
        ns_mask_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        let s = ns_mask_new([2, 2, 1].as_ptr(), [1.0; 3].as_ptr(), [0, 1, 2, 0].as_ptr(), 4, &mut m);
        assert_eq!(s, NsStatus::MalformedInput);
        assert!(m.is_null());
        assert!(last_error().contains("expected 0 or 1"), "{}", last_error());

        let s = ns_mask_new([2, 2, 1].as_ptr(), [1.0, 0.0, 1.0].as_ptr(), [0; 4].as_ptr(), 4, &mut m);
        assert_eq!(s, NsStatus::InvalidArgument);

        let s = ns_mask_new(ptr::null(), [1.0; 3].as_ptr(), [0; 4].as_ptr(), 4, &mut m);
        assert_eq!(s, NsStatus::NullArgument);

        let missing = CString::new("/nonexistent/dir/m.mvol").unwrap();
        assert_eq!(ns_mask_load(missing.as_ptr(), &mut m), NsStatus::Io);

        let mut out = 0.0;
        let s = ns_auc([0.1, 0.2].as_ptr(), [0, 0].as_ptr(), 2, &mut out);
        assert_eq!(s, NsStatus::BadInput);
        assert!(last_error().contains("missing label 1"));

        let a = new_mask([3, 3, 3], &ball([3, 3, 3], 1.0));
        let b = new_mask([3, 3, 2], &ball([3, 3, 2], 1.0));
        assert_eq!(ns_dice(a, b, &mut out), NsStatus::BadInput);
        ns_mask_free(a);
        ns_mask_free(b);
    }
}

#[test]
fn model_encode_reconstruct_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let config = VaeConfig {
        input_dims: [8, 8, 4],
        stages: 2,
        channels: vec![2, 4],
        latent_dim: 3,
        ..VaeConfig::default()
    };
    let vae = VaeParams::<f32>::init(config, 7).unwrap();
    vae.save(&ckpt).unwrap();
    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            ns_model_load(path.as_ptr(), &mut model),
            NsStatus::Ok,
            "{}",
            last_error()
        );
        let mut dim = 0;
        assert_eq!(ns_model_latent_dim(model, &mut dim), NsStatus::Ok);
        assert_eq!(dim, 3);

        let mut latents = Vec::new();
        let mut masks = Vec::new();
        for r in [1.5, 2.0, 2.5, 3.0] {
            let m = new_mask([8, 8, 4], &ball([8, 8, 4], r));
            let mut mu = [0.0; 3];
            assert_eq!(ns_model_encode(model, m, mu.as_mut_ptr(), 3), NsStatus::Ok);
            let expected = vae
                .encode(&normshape::volume::MaskVolume::new([8, 8, 4], [1.0, 1.0, 2.0], ball([8, 8, 4], r)).unwrap())
                .unwrap();
            assert_eq!(mu.to_vec(), expected.mu);
            latents.extend(mu);
            masks.push(m);
        }
        let mut short = [0.0; 2];
        assert_eq!(
            ns_model_encode(model, masks[0], short.as_mut_ptr(), 2),
            NsStatus::BadInput
        );

        let mut rec = ptr::null_mut();
        assert_eq!(ns_model_reconstruct(model, masks[0], &mut rec), NsStatus::Ok);
        let mut d = [0usize; 3];
        ns_mask_dims(rec, d.as_mut_ptr());
        assert_eq!(d, [8, 8, 4]);

        let mut stats = ptr::null_mut();
        assert_eq!(ns_normative_fit(latents.as_ptr(), 4, 3, &mut stats), NsStatus::Ok);
        let mean: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|i| latents[i * 3 + j]).sum::<f64>() / 4.0)
            .collect();
        let mut score = -1.0;
        assert_eq!(ns_zero_shot_score(stats, mean.as_ptr(), 3, &mut score), NsStatus::Ok);
        assert!(score.abs() < 1e-12, "{score}");

        ns_normative_free(stats);
        ns_mask_free(rec);
        for m in masks {
            ns_mask_free(m);
        }
        ns_model_free(model);
    }
}

#[test]
fn auc_matches_library() {
    let s = [0.3, 0.9, 0.1, 0.5, 0.5, 0.7];
    let l = [0u8, 1, 0, 1, 0, 1];
    let mut out = 0.0;
    assert_eq!(unsafe { ns_auc(s.as_ptr(), l.as_ptr(), 6, &mut out) }, NsStatus::Ok);
    assert_eq!(out, normshape::eval::auc(&s, &l).unwrap());
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(ns_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/normshape.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "ns_mask_new",
        "ns_model_encode",
        "ns_zero_shot_score",
        "NS_STATUS_PANIC",
        "typedef struct NsModel NsModel",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"normshape.h\"\nint main(void) { NsMask *m = 0; return ns_mask_dims(m, 0) == NS_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
