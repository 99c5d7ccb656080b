//! C ABI over mdrnet-core.
//!
//! Objects are opaque heap handles created by `*_new` / `*_load` / `*_build`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`MdrStatus`]; on failure a message is available from
//! [`mdr_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mdrnet_core::backbone::{self, BackboneConfig, BackboneState};
use mdrnet_core::ingest::{load_bin, read_tensor, voxelize, write_tensor, VoxelizeConfig};
use mdrnet_core::reduce::{reduce, ReductionKind, ReductionTag};
use mdrnet_core::{Coord, DenseBevMap, Error, GridGeometry, SparseVoxelTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfBounds = 3,
    Shape = 4,
    Format = 5,
    Io = 6,
    Config = 7,
    NonFinite = 8,
    CheckFailed = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdrReduction {
    MeanPool = 0,
    MaxPool = 1,
    FlattenConv = 2,
    FullHeightSparseConv = 3,
    SdrRelu = 4,
    SdrSigmoid = 5,
    SdrSoftmax = 6,
}

impl From<MdrReduction> for ReductionTag {
    fn from(r: MdrReduction) -> Self {
        ReductionTag::ALL[r as usize]
    }
}

/// Sparse voxel tensor handle.
pub struct MdrTensor(SparseVoxelTensor);
/// Dense BEV map handle.
pub struct MdrMap(DenseBevMap);
/// Backbone parameters handle.
pub struct MdrModel(BackboneState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MdrStatus {
    match e {
        Error::InvalidGeometry(_) | Error::Usage(_) => MdrStatus::InvalidArgument,
        Error::OutOfBounds { .. } => MdrStatus::OutOfBounds,
        Error::Shape(_) => MdrStatus::Shape,
        Error::Format(_) => MdrStatus::Format,
        Error::Io { .. } => MdrStatus::Io,
        Error::Config(_) => MdrStatus::Config,
        Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => MdrStatus::NonFinite,
        Error::Check(_) => MdrStatus::CheckFailed,
    }
}

struct Fail(MdrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MdrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MdrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdrStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MdrStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MdrStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

fn coord(i: u32, j: u32, k: u32) -> Coord {
    Coord::new(i, j, k)
}

/// Message of the last failed call on this thread, or NULL. Owned by the library.
#[no_mangle]
pub extern "C" fn mdr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn mdr_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_new(
    nx: usize,
    ny: usize,
    nz: usize,
    channels: usize,
    out: *mut *mut MdrTensor,
) -> MdrStatus {
    guard(|| {
        let t = SparseVoxelTensor::new(GridGeometry::from_extents([nx, ny, nz])?, channels)?;
        put(out, MdrTensor(t))
    })
}

/// # Safety
/// `t` must be NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_free(t: *mut MdrTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Inserts or overwrites one voxel. `len` must equal the channel count.
///
/// # Safety
/// `t` must be a live handle; `feat` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_set(
    t: *mut MdrTensor,
    i: u32,
    j: u32,
    k: u32,
    feat: *const f64,
    len: usize,
) -> MdrStatus {
    guard(|| {
        let t = as_mut(t, "tensor")?;
        let f = slice_arg(feat, len, "feat")?;
        t.0.set_voxel(coord(i, j, k), f)?;
        Ok(())
    })
}

/// Copies one voxel's features into `out` and sets `*found`; vacant voxels
/// leave `out` untouched.
///
/// # Safety
/// `t` must be a live handle; `out` must hold `len` doubles; `found` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_get(
    t: *const MdrTensor,
    i: u32,
    j: u32,
    k: u32,
    out: *mut f64,
    len: usize,
    found: *mut bool,
) -> MdrStatus {
    guard(|| {
        let t = as_ref(t, "tensor")?;
        let found = as_mut(found, "found")?;
        let c = coord(i, j, k);
        if !t.0.geometry().contains(c) {
            return Err(Error::OutOfBounds { coord: c.as_array(), extents: t.0.geometry().extents }.into());
        }
        if len != t.0.channels() {
            return Err(Fail(MdrStatus::Shape, format!("buffer holds {len} values, tensor has {} channels", t.0.channels())));
        }
        *found = false;
        if let Some(f) = t.0.get(c) {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(f);
            *found = true;
        }
        Ok(())
    })
}

/// Number of active voxels; 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_len(t: *const MdrTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_channels(t: *const MdrTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.channels())
}

/// Reads a tensor file (SVT1).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_load(path: *const c_char, out: *mut *mut MdrTensor) -> MdrStatus {
    guard(|| {
        let t = read_tensor(path_arg(path, "path")?)?;
        put(out, MdrTensor(t))
    })
}

/// # Safety
/// `t` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mdr_tensor_save(t: *const MdrTensor, path: *const c_char) -> MdrStatus {
    guard(|| {
        write_tensor(path_arg(path, "path")?, &as_ref(t, "tensor")?.0)?;
        Ok(())
    })
}

/// Voxelizes a point file. `config_path` may be NULL for the built-in toy grid.
///
/// # Safety
/// Paths must be NULL (config only) or NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_voxelize_file(
    bin_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut MdrTensor,
) -> MdrStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            VoxelizeConfig::toy()
        } else {
            VoxelizeConfig::load(path_arg(config_path, "config_path")?)?
        };
        let (cloud, _) = load_bin(path_arg(bin_path, "bin_path")?)?;
        put(out, MdrTensor(voxelize(&cloud, &cfg)?))
    })
}

/// Reduces along height with freshly initialized parameters drawn from `seed`.
///
/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_reduce(
    t: *const MdrTensor,
    kind: MdrReduction,
    seed: u64,
    out: *mut *mut MdrMap,
) -> MdrStatus {
    guard(|| {
        let t = as_ref(t, "tensor")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = ReductionKind::init(kind.into(), t.0.channels(), t.0.geometry().nz(), &mut rng)?;
        put(out, MdrMap(reduce(&t.0, &k)?.map))
    })
}

/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdr_map_free(m: *mut MdrMap) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_map_shape(
    m: *const MdrMap,
    width: *mut usize,
    height: *mut usize,
    channels: *mut usize,
) -> MdrStatus {
    guard(|| {
        let m = as_ref(m, "map")?;
        *as_mut(width, "width")? = m.0.width();
        *as_mut(height, "height")? = m.0.height();
        *as_mut(channels, "channels")? = m.0.channels();
        Ok(())
    })
}

/// Copies the map, laid out `(i * height + j) * channels + c`, into `out`.
/// `len` must equal `width * height * channels`.
///
/// # Safety
/// `m` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mdr_map_copy(m: *const MdrMap, out: *mut f64, len: usize) -> MdrStatus {
    guard(|| {
        let v = as_ref(m, "map")?.0.values();
        if len != v.len() {
            return Err(Fail(MdrStatus::Shape, format!("buffer holds {len} values, map has {}", v.len())));
        }
        if len > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(v);
        }
        Ok(())
    })
}

/// Builds a backbone. `config_json` may be NULL for the default configuration.
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_model_build(config_json: *const c_char, seed: u64, out: *mut *mut MdrModel) -> MdrStatus {
    guard(|| {
        let cfg = if config_json.is_null() {
            BackboneConfig::default()
        } else {
            let s = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail(MdrStatus::InvalidArgument, "config is not UTF-8".into()))?;
            serde_json::from_str(s).map_err(|e| Fail(MdrStatus::Config, format!("backbone config: {e}")))?
        };
        put(out, MdrModel(BackboneState::build(&cfg, seed)?))
    })
}

/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdr_model_free(m: *mut MdrModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdr_model_num_params(m: *const MdrModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.num_params())
}

/// # Safety
/// `m` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mdr_model_save(m: *const MdrModel, dir: *const c_char) -> MdrStatus {
    guard(|| {
        backbone::save(path_arg(dir, "dir")?, &as_ref(m, "model")?.0)?;
        Ok(())
    })
}

/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_model_load(dir: *const c_char, out: *mut *mut MdrModel) -> MdrStatus {
    guard(|| put(out, MdrModel(backbone::load(path_arg(dir, "dir")?)?)))
}

/// Runs the backbone and returns the final BEV map.
///
/// # Safety
/// `m` and `t` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdr_model_forward(m: *const MdrModel, t: *const MdrTensor, out: *mut *mut MdrMap) -> MdrStatus {
    guard(|| {
        let map = backbone::forward(&as_ref(m, "model")?.0, &as_ref(t, "tensor")?.0)?;
        put(out, MdrMap(map))
    })
}
