//! C interface to the morphing engine.
//!
//! Every function returns a [`PmStatus`]. On failure the message is kept per
//! thread and read with [`pm_last_error`]. Engines are opaque handles created
//! by `pm_engine_new_*` and released with [`pm_engine_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use physmorph::config::ExperimentConfig;
use physmorph::io::{decode_checkpoint, encode_checkpoint, export_snapshot, read_file, write_file};
use physmorph::metrics::evaluate;
use physmorph::mpm::ParticleState;
use physmorph::scene::Scene;
use physmorph::train::{run_episode, TrainState};
use physmorph::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque engine handle.
pub struct PmEngine {
    scene: Scene,
    state: TrainState,
    current: ParticleState,
    last_physics: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PmStatus {
    match e {
        Error::Config { .. } | Error::Shape(_) | Error::OutsideMargin { .. } => PmStatus::Config,
        Error::Io { .. } => PmStatus::Io,
        Error::Format(_) => PmStatus::Format,
        Error::NonFinite => PmStatus::Numeric,
        Error::InvalidArgument(_) | Error::TapeMismatch(_) => PmStatus::InvalidArgument,
    }
}

fn fail(status: PmStatus, msg: &str) -> PmStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), PmStatus>) -> PmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PmStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(PmStatus::Panic, &format!("internal panic: {msg}"))
        }
    }
}

fn check(r: physmorph::Result<()>) -> Result<(), PmStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PmStatus> {
    if p.is_null() {
        return Err(fail(PmStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PmStatus::InvalidArgument, &format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or points to a live engine.
unsafe fn handle<'a>(p: *const PmEngine) -> Result<&'a PmEngine, PmStatus> {
    p.as_ref().ok_or_else(|| fail(PmStatus::NullPointer, "engine is null"))
}

/// # Safety
/// `p` is null or points to a live engine not aliased elsewhere.
unsafe fn handle_mut<'a>(p: *mut PmEngine) -> Result<&'a mut PmEngine, PmStatus> {
    p.as_mut().ok_or_else(|| fail(PmStatus::NullPointer, "engine is null"))
}

/// # Safety
/// `p` is null or valid for a write of `T`.
unsafe fn put<T>(p: *mut T, v: T) -> Result<(), PmStatus> {
    if p.is_null() {
        return Err(fail(PmStatus::NullPointer, "output pointer is null"));
    }
    p.write(v);
    Ok(())
}

fn build(cfg: ExperimentConfig) -> Result<*mut PmEngine, PmStatus> {
    let scene = Scene::build(&cfg).map_err(|e| fail(status_of(&e), &e.to_string()))?;
    let state = TrainState::new(&scene);
    let current = scene.initial.clone();
    Ok(Box::into_raw(Box::new(PmEngine {
        scene,
        state,
        current,
        last_physics: f64::NAN,
    })))
}

/// Message of the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an engine from JSON config text. Empty text gives the defaults.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_new_from_json(json: *const c_char, out: *mut *mut PmEngine) -> PmStatus {
    guard(|| {
        put(out, ptr::null_mut())?;
        let text = str_arg(json, "json")?;
        let cfg = ExperimentConfig::from_json(text).map_err(|e| fail(status_of(&e), &e.to_string()))?;
        put(out, build(cfg)?)
    })
}

/// Creates an engine from a config file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_new_from_file(path: *const c_char, out: *mut *mut PmEngine) -> PmStatus {
    guard(|| {
        put(out, ptr::null_mut())?;
        let p = PathBuf::from(str_arg(path, "path")?);
        let cfg = ExperimentConfig::load(&p).map_err(|e| fail(status_of(&e), &e.to_string()))?;
        put(out, build(cfg)?)
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` is null or was returned by `pm_engine_new_*` and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_free(engine: *mut PmEngine) {
    if !engine.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(engine))));
    }
}

/// Runs `count` training episodes.
///
/// # Safety
/// `engine` is a live handle used by one thread at a time.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_run_episodes(engine: *mut PmEngine, count: usize) -> PmStatus {
    guard(|| {
        let e = handle_mut(engine)?;
        for _ in 0..count {
            let o = run_episode(&e.scene, &mut e.state).map_err(|err| fail(status_of(&err), &err.to_string()))?;
            e.current = o.end;
            e.last_physics = o.end_physics;
        }
        Ok(())
    })
}

/// Episodes completed so far.
///
/// # Safety
/// `engine` is a live handle; `out` is valid for writing.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_episode(engine: *const PmEngine, out: *mut usize) -> PmStatus {
    guard(|| put(out, handle(engine)?.state.episode))
}

/// Number of anchor particles.
///
/// # Safety
/// `engine` is a live handle; `out` is valid for writing.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_particle_count(engine: *const PmEngine, out: *mut usize) -> PmStatus {
    guard(|| put(out, handle(engine)?.current.len()))
}

/// Physics loss of the last episode's end state; NaN before any episode.
///
/// # Safety
/// `engine` is a live handle; `out` is valid for writing.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_physics_loss(engine: *const PmEngine, out: *mut f64) -> PmStatus {
    guard(|| put(out, handle(engine)?.last_physics))
}

/// Copies current anchor positions as `x0 y0 z0 x1 ...` in grid units.
/// `len` is the capacity of `buf` in doubles and must be at least
/// `3 * particle_count`.
///
/// # Safety
/// `engine` is a live handle; `buf` is valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_positions(engine: *const PmEngine, buf: *mut f64, len: usize) -> PmStatus {
    guard(|| {
        let e = handle(engine)?;
        if buf.is_null() {
            return Err(fail(PmStatus::NullPointer, "buffer is null"));
        }
        let need = 3 * e.current.len();
        if len < need {
            return Err(fail(
                PmStatus::BufferTooSmall,
                &format!("buffer holds {len} doubles, {need} needed"),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (d, x) in dst.chunks_exact_mut(3).zip(&e.current.x) {
            d.copy_from_slice(x.as_slice());
        }
        Ok(())
    })
}

/// Chamfer distance of the current state against the target surface.
///
/// # Safety
/// `engine` is a live handle; `out` is valid for writing.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_chamfer(engine: *const PmEngine, out: *mut f64) -> PmStatus {
    guard(|| {
        let e = handle(engine)?;
        let ev = evaluate(&e.scene, &e.current).map_err(|err| fail(status_of(&err), &err.to_string()))?;
        put(out, ev.chamfer)
    })
}

/// Writes the current anchor state as a PMGS snapshot.
///
/// # Safety
/// `engine` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_save_snapshot(engine: *const PmEngine, path: *const c_char) -> PmStatus {
    guard(|| {
        let e = handle(engine)?;
        let p = PathBuf::from(str_arg(path, "path")?);
        check(export_snapshot(&e.current, &p))
    })
}

/// Writes the training state for a later [`pm_engine_load_checkpoint`].
///
/// # Safety
/// `engine` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_save_checkpoint(engine: *const PmEngine, path: *const c_char) -> PmStatus {
    guard(|| {
        let e = handle(engine)?;
        let p = PathBuf::from(str_arg(path, "path")?);
        check(write_file(&p, &encode_checkpoint(&e.state)))
    })
}

/// Restores a training state written by [`pm_engine_save_checkpoint`] for
/// the same config.
///
/// # Safety
/// `engine` is a live handle used by one thread at a time; `path` is a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pm_engine_load_checkpoint(engine: *mut PmEngine, path: *const c_char) -> PmStatus {
    guard(|| {
        let e = handle_mut(engine)?;
        let p = PathBuf::from(str_arg(path, "path")?);
        let bytes = read_file(&p).map_err(|err| fail(status_of(&err), &err.to_string()))?;
        let st = decode_checkpoint(&bytes).map_err(|err| fail(status_of(&err), &err.to_string()))?;
        if st.multipliers.len() != e.scene.initial.len() {
            return Err(fail(
                PmStatus::InvalidArgument,
                "checkpoint does not match the engine's particle count",
            ));
        }
        e.state = st;
        e.current = e.state.start.clone();
        e.last_physics = f64::NAN;
        Ok(())
    })
}
