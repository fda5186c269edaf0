//! C ABI over the `fftat` library: load or initialize a model, classify
//! images, and inspect transferability graphs.
//!
//! Every fallible function returns an [`FftatStatus`]; on failure the
//! message is available from [`fftat_last_error_message`] on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fftat::model::{FftatModel, ModelConfig};
use fftat::trainer::TrainState;
use fftat::transferability::{transferability_score, TransferabilityGraph};
use fftat::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Numerical = 6,
    Panic = 7,
}

/// Model in f64 precision, with the graph it was trained with.
pub struct FftatModelHandle {
    model: FftatModel<f64>,
    graph: TransferabilityGraph<f64>,
}

/// A `P×P` transferability graph.
pub struct FftatGraphHandle {
    graph: TransferabilityGraph<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FftatStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } | Error::Data(_) => FftatStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => FftatStatus::Config,
        Error::NonFinite(_) => FftatStatus::Numerical,
        Error::File { .. } | Error::Io(_) => FftatStatus::Io,
        Error::Checkpoint(_) => FftatStatus::Checkpoint,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FftatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FftatStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            FftatStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            FftatStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null, and the caller guarantees a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Error::Config(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn store<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: `out` is non-null and points to writable storage for a pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the most recent failure on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fftat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Fresh model with default dimensions except `image_side` and `classes`.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_model_new(
    image_side: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut FftatModelHandle,
) -> FftatStatus {
    guard(|| {
        let config = ModelConfig {
            image_side,
            classes,
            ..ModelConfig::default()
        };
        let model = FftatModel::init(config, seed)?;
        let graph = TransferabilityGraph::unweighted(config.patches());
        store(out, FftatModelHandle { model, graph }, "out")
    })
}

/// Loads a training checkpoint written in either precision.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_model_load(path: *const c_char, out: *mut *mut FftatModelHandle) -> FftatStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let handle = match TrainState::<f64>::load(&path) {
            Ok((s, _)) => FftatModelHandle {
                model: s.model,
                graph: s.graph,
            },
            Err(_) => {
                let (s, _) = TrainState::<f32>::load(&path)?;
                FftatModelHandle {
                    model: FftatModel::from_params(s.model.config, s.model.params.cast())?,
                    graph: TransferabilityGraph {
                        matrix: s.graph.matrix.cast(),
                        iteration_built: s.graph.iteration_built,
                    },
                }
            }
        };
        store(out, handle, "out")
    })
}

/// Releases a model; null is ignored.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_model_free(model: *mut FftatModelHandle) {
    if !model.is_null() {
        // SAFETY: pointer came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Image side length in pixels; 0 for a null handle.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_model_image_side(model: *const FftatModelHandle) -> usize {
    non_null(model, "model").map_or(0, |m| m.model.config.image_side)
}

/// Number of classes; 0 for a null handle.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_model_classes(model: *const FftatModelHandle) -> usize {
    non_null(model, "model").map_or(0, |m| m.model.config.classes)
}

/// Classifies `count` CHW images with values in [0, 1], writing one label
/// per image. `images` holds `count * 3 * side * side` floats.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_model_predict(
    model: *const FftatModelHandle,
    images: *const f32,
    count: usize,
    labels: *mut usize,
) -> FftatStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if images.is_null() {
            return Err(Failure::Null("images"));
        }
        if labels.is_null() {
            return Err(Failure::Null("labels"));
        }
        let side = m.model.config.image_side;
        let n = count * 3 * side * side;
        // SAFETY: the caller guarantees `images` has `n` floats and
        // `labels` has room for `count` entries.
        let (imgs, out) = unsafe {
            (
                std::slice::from_raw_parts(images, n),
                std::slice::from_raw_parts_mut(labels, count),
            )
        };
        let pred = m.model.predict(imgs, &m.graph, true)?;
        out.copy_from_slice(&pred);
        Ok(())
    })
}

/// Copy of the model's current graph.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_model_graph(
    model: *const FftatModelHandle,
    out: *mut *mut FftatGraphHandle,
) -> FftatStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        store(out, FftatGraphHandle { graph: m.graph.clone() }, "out")
    })
}

/// All-ones graph over `patches` patches.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_graph_unweighted(patches: usize, out: *mut *mut FftatGraphHandle) -> FftatStatus {
    guard(|| {
        if patches == 0 {
            return Err(Error::Config("patches must be positive".into()).into());
        }
        store(
            out,
            FftatGraphHandle {
                graph: TransferabilityGraph::unweighted(patches),
            },
            "out",
        )
    })
}

/// Reads a graph CSV as written by training runs.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_graph_load_csv(path: *const c_char, out: *mut *mut FftatGraphHandle) -> FftatStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let text = std::fs::read_to_string(&path).map_err(Error::from)?;
        let graph = TransferabilityGraph::from_csv(&text)?;
        store(out, FftatGraphHandle { graph }, "out")
    })
}

/// Releases a graph; null is ignored.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_graph_free(graph: *mut FftatGraphHandle) {
    if !graph.is_null() {
        // SAFETY: pointer came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// Side length `P`; 0 for a null handle.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_graph_patches(graph: *const FftatGraphHandle) -> usize {
    non_null(graph, "graph").map_or(0, |g| g.graph.patches())
}

/// Copies the row-major `P×P` matrix into `out`, which holds `len` doubles.
/// # Safety
/// Pointer arguments must be null or valid for the documented extent;
/// handles must come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fftat_graph_copy(graph: *const FftatGraphHandle, out: *mut f64, len: usize) -> FftatStatus {
    guard(|| {
        let g = non_null(graph, "graph")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let data = g.graph.matrix.data();
        if len < data.len() {
            return Err(Error::Config(format!("buffer holds {len} values, graph needs {}", data.len())).into());
        }
        // SAFETY: `out` has at least `data.len()` writable doubles.
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len()) };
        Ok(())
    })
}

/// Transferability score for a discriminator source-probability `p`.
#[no_mangle]
pub extern "C" fn fftat_transferability_score(p: f64) -> f64 {
    transferability_score(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = fftat_last_error_message();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn model_round_trip() {
        unsafe {
            let mut m = std::ptr::null_mut();
            assert_eq!(fftat_model_new(16, 3, 0, &mut m), FftatStatus::Ok);
            assert_eq!(fftat_model_classes(m), 3);
            assert_eq!(fftat_model_image_side(m), 16);
            let images = vec![0.5f32; 2 * 3 * 16 * 16];
            let mut labels = [99usize; 2];
            assert_eq!(
                fftat_model_predict(m, images.as_ptr(), 2, labels.as_mut_ptr()),
                FftatStatus::Ok
            );
            assert!(labels.iter().all(|&l| l < 3));
            let mut g = std::ptr::null_mut();
            assert_eq!(fftat_model_graph(m, &mut g), FftatStatus::Ok);
            assert_eq!(fftat_graph_patches(g), 4);
            let mut buf = [0.0; 16];
            assert_eq!(fftat_graph_copy(g, buf.as_mut_ptr(), 16), FftatStatus::Ok);
            assert!(buf.iter().all(|&v| v == 1.0));
            assert_eq!(fftat_graph_copy(g, buf.as_mut_ptr(), 3), FftatStatus::Config);
            fftat_graph_free(g);
            fftat_model_free(m);
        }
    }

    #[test]
    fn errors_are_reported() {
        unsafe {
            let mut m = std::ptr::null_mut();
            assert_eq!(fftat_model_new(15, 3, 0, &mut m), FftatStatus::Config);
            assert!(last_error().contains("15"));
            assert_eq!(
                fftat_model_predict(std::ptr::null(), std::ptr::null(), 0, std::ptr::null_mut()),
                FftatStatus::NullPointer
            );
            assert!(last_error().contains("model"));
            let path = CString::new("/nonexistent/ckpt.bin").unwrap();
            assert_eq!(fftat_model_load(path.as_ptr(), &mut m), FftatStatus::Io);
            fftat_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn score_peaks_at_half() {
        assert_eq!(fftat_transferability_score(0.5), 1.0);
        assert!(fftat_transferability_score(0.9) < 1.0);
    }
}
