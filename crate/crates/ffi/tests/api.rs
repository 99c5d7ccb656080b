use std::ffi::{CStr, CString};
use std::ptr;

use mdrnet_ffi::*;

fn last_error() -> String {
    let p = mdr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn tensor_set_get_save_load() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(mdr_tensor_new(3, 3, 3, 2, &mut t), MdrStatus::Ok);
        assert_eq!(mdr_tensor_set(t, 1, 2, 0, [0.5, -1.0].as_ptr(), 2), MdrStatus::Ok);
        assert_eq!(mdr_tensor_set(t, 1, 2, 0, [2.0, 3.0].as_ptr(), 2), MdrStatus::Ok);
        assert_eq!(mdr_tensor_len(t), 1);
        assert_eq!(mdr_tensor_channels(t), 2);

        let mut buf = [0.0; 2];
        let mut found = false;
        assert_eq!(mdr_tensor_get(t, 1, 2, 0, buf.as_mut_ptr(), 2, &mut found), MdrStatus::Ok);
        assert!(found);
        assert_eq!(buf, [2.0, 3.0]);
        assert_eq!(mdr_tensor_get(t, 0, 0, 0, buf.as_mut_ptr(), 2, &mut found), MdrStatus::Ok);
        assert!(!found);

        assert_eq!(mdr_tensor_set(t, 3, 0, 0, buf.as_ptr(), 2), MdrStatus::OutOfBounds);
        assert!(last_error().contains("outside extents"));
        assert_eq!(mdr_tensor_set(t, 0, 0, 0, buf.as_ptr(), 1), MdrStatus::Shape);
        assert_eq!(mdr_tensor_get(t, 0, 0, 0, buf.as_mut_ptr(), 3, &mut found), MdrStatus::Shape);

        let dir = tempfile::tempdir().unwrap();
        let path = cpath(&dir.path().join("t.svt"));
        assert_eq!(mdr_tensor_save(t, path.as_ptr()), MdrStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mdr_tensor_load(path.as_ptr(), &mut back), MdrStatus::Ok);
        assert_eq!(mdr_tensor_len(back), 1);
        let missing = cpath(&dir.path().join("nope.svt"));
        let mut none = ptr::null_mut();
        assert_eq!(mdr_tensor_load(missing.as_ptr(), &mut none), MdrStatus::Io);
        assert!(none.is_null());
        mdr_tensor_free(back);
        mdr_tensor_free(t);
    }
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        assert_eq!(mdr_tensor_new(2, 2, 2, 1, ptr::null_mut()), MdrStatus::NullPointer);
        let mut t = ptr::null_mut();
        assert_eq!(mdr_tensor_new(0, 2, 2, 1, &mut t), MdrStatus::InvalidArgument);
        assert!(t.is_null());
        assert_eq!(mdr_tensor_set(ptr::null_mut(), 0, 0, 0, ptr::null(), 0), MdrStatus::NullPointer);
        assert_eq!(mdr_tensor_len(ptr::null()), 0);
        mdr_tensor_free(ptr::null_mut());
        mdr_map_free(ptr::null_mut());
        mdr_model_free(ptr::null_mut());
        let mut m = ptr::null_mut();
        let bad = CString::new("{\"stage_channels\": [1, 2]}").unwrap();
        assert_eq!(mdr_model_build(bad.as_ptr(), 0, &mut m), MdrStatus::Config);
        mdr_clear_error();
        assert!(mdr_last_error().is_null());
    }
}

#[test]
fn reduce_every_kind_and_copy_map() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(mdr_tensor_new(2, 2, 3, 1, &mut t), MdrStatus::Ok);
        for (k, v) in [(0u32, 1.0), (2, 3.0)] {
            assert_eq!(mdr_tensor_set(t, 1, 0, k, [v].as_ptr(), 1), MdrStatus::Ok);
        }
        for kind in [
            MdrReduction::MeanPool,
            MdrReduction::MaxPool,
            MdrReduction::FlattenConv,
            MdrReduction::FullHeightSparseConv,
            MdrReduction::SdrRelu,
            MdrReduction::SdrSigmoid,
            MdrReduction::SdrSoftmax,
        ] {
            let mut m = ptr::null_mut();
            assert_eq!(mdr_reduce(t, kind, 7, &mut m), MdrStatus::Ok, "{kind:?}");
            let (mut w, mut h, mut c) = (0, 0, 0);
            assert_eq!(mdr_map_shape(m, &mut w, &mut h, &mut c), MdrStatus::Ok);
            assert_eq!((w, h, c), (2, 2, 1));
            let mut v = [f64::NAN; 4];
            assert_eq!(mdr_map_copy(m, v.as_mut_ptr(), 4), MdrStatus::Ok);
            assert!(v.iter().all(|x| x.is_finite()));
            match kind {
                MdrReduction::MeanPool => assert_eq!(v, [0.0, 0.0, 2.0, 0.0]),
                MdrReduction::MaxPool => assert_eq!(v, [0.0, 0.0, 3.0, 0.0]),
                _ => {}
            }
            assert_eq!(mdr_map_copy(m, v.as_mut_ptr(), 3), MdrStatus::Shape);
            mdr_map_free(m);
        }
        mdr_tensor_free(t);
    }
}

#[test]
fn model_build_forward_save_load() {
    unsafe {
        let cfg = CString::new(r#"{"input_extents": [16, 16, 8], "stage_channels": [2, 4, 4, 4]}"#).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(mdr_model_build(cfg.as_ptr(), 3, &mut model), MdrStatus::Ok);
        assert!(mdr_model_num_params(model) > 0);

        let mut t = ptr::null_mut();
        assert_eq!(mdr_tensor_new(16, 16, 8, 4, &mut t), MdrStatus::Ok);
        for n in 0..10u32 {
            let f = [n as f64 * 0.1, -0.2, 0.3, 0.5];
            assert_eq!(mdr_tensor_set(t, n, 15 - n, n % 8, f.as_ptr(), 4), MdrStatus::Ok);
        }
        let mut out = ptr::null_mut();
        assert_eq!(mdr_model_forward(model, t, &mut out), MdrStatus::Ok);
        let (mut w, mut h, mut c) = (0, 0, 0);
        assert_eq!(mdr_map_shape(out, &mut w, &mut h, &mut c), MdrStatus::Ok);
        assert_eq!((w, h, c), (2, 2, 4));
        let mut a = vec![0.0; 16];
        assert_eq!(mdr_map_copy(out, a.as_mut_ptr(), 16), MdrStatus::Ok);

        let dir = tempfile::tempdir().unwrap();
        let d = cpath(dir.path());
        assert_eq!(mdr_model_save(model, d.as_ptr()), MdrStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(mdr_model_load(d.as_ptr(), &mut loaded), MdrStatus::Ok);
        let mut out2 = ptr::null_mut();
        assert_eq!(mdr_model_forward(loaded, t, &mut out2), MdrStatus::Ok);
        let mut b = vec![0.0; 16];
        assert_eq!(mdr_map_copy(out2, b.as_mut_ptr(), 16), MdrStatus::Ok);
        assert_eq!(a, b);

        let mut wrong = ptr::null_mut();
        assert_eq!(mdr_tensor_new(8, 8, 8, 4, &mut wrong), MdrStatus::Ok);
        let mut none = ptr::null_mut();
        assert_eq!(mdr_model_forward(model, wrong, &mut none), MdrStatus::Shape);

        for p in [out, out2] {
            mdr_map_free(p);
        }
        mdr_tensor_free(wrong);
        mdr_tensor_free(t);
        mdr_model_free(loaded);
        mdr_model_free(model);
    }
}

#[test]
fn voxelize_point_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for p in [[1.0f32, 0.0, 0.0, 0.5], [2.2, 1.1, -1.0, 0.9]] {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.path().join("p.bin");
    std::fs::write(&bin, bytes).unwrap();
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(mdr_voxelize_file(cpath(&bin).as_ptr(), ptr::null(), &mut t), MdrStatus::Ok);
        assert_eq!(mdr_tensor_len(t), 2);
        assert_eq!(mdr_tensor_channels(t), 4);
        mdr_tensor_free(t);
        std::fs::write(&bin, [0u8; 17]).unwrap();
        let mut bad = ptr::null_mut();
        assert_eq!(mdr_voxelize_file(cpath(&bin).as_ptr(), ptr::null(), &mut bad), MdrStatus::Format);
    }
}

#[test]
fn matches_core_results() {
    use mdrnet_core::backbone::{self, BackboneConfig, BackboneState};
    use mdrnet_core::ingest::read_tensor;
    use mdrnet_core::reduce::{reduce, ReductionKind, ReductionTag};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.svt");
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(mdr_tensor_new(16, 16, 8, 4, &mut t), MdrStatus::Ok);
        for n in 0..40u32 {
            let f = [(n as f64).sin(), 0.1 * n as f64, -0.3, 1.0];
            assert_eq!(mdr_tensor_set(t, (n * 7) % 16, (n * 3) % 16, n % 8, f.as_ptr(), 4), MdrStatus::Ok);
        }
        assert_eq!(mdr_tensor_save(t, cpath(&path).as_ptr()), MdrStatus::Ok);
        let core_t = read_tensor(&path).unwrap();

        let kinds = [
            MdrReduction::MeanPool,
            MdrReduction::MaxPool,
            MdrReduction::FlattenConv,
            MdrReduction::FullHeightSparseConv,
            MdrReduction::SdrRelu,
            MdrReduction::SdrSigmoid,
            MdrReduction::SdrSoftmax,
        ];
        for (kind, tag) in kinds.into_iter().zip(ReductionTag::ALL) {
            let mut m = ptr::null_mut();
            assert_eq!(mdr_reduce(t, kind, 11, &mut m), MdrStatus::Ok);
            let mut got = vec![0.0; 16 * 16 * 4];
            let len = got.len();
            let mut w = 0;
            let mut h = 0;
            let mut c = 0;
            assert_eq!(mdr_map_shape(m, &mut w, &mut h, &mut c), MdrStatus::Ok);
            assert_eq!(w * h * c, len, "{tag:?}");
            assert_eq!(mdr_map_copy(m, got.as_mut_ptr(), len), MdrStatus::Ok);
            let k = ReductionKind::init(tag, 4, 8, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
            assert_eq!(got, reduce(&core_t, &k).unwrap().map.values(), "{tag:?}");
            mdr_map_free(m);
        }

        let cfg = BackboneConfig {
            input_extents: [16, 16, 8],
            stage_channels: [2, 4, 4, 4],
            ..Default::default()
        };
        let json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(mdr_model_build(json.as_ptr(), 5, &mut model), MdrStatus::Ok);
        let state = BackboneState::build(&cfg, 5).unwrap();
        let want = backbone::forward(&state, &core_t).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(mdr_model_forward(model, t, &mut out), MdrStatus::Ok);
        let mut got = vec![0.0; want.values().len()];
        assert_eq!(mdr_map_copy(out, got.as_mut_ptr(), got.len()), MdrStatus::Ok);
        assert_eq!(got, want.values());
        mdr_map_free(out);
        mdr_model_free(model);
        mdr_tensor_free(t);
    }
}
