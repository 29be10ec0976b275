// SPDX-License-Identifier: Apache-2.0

//! C ABI over `funcgnn`.
//!
//! Every function returns an `FgStatus`. On anything other than `FG_STATUS_OK`
//! a message is available from `fg_last_error_message` on the same thread.
//! Handles are opaque and owned by the caller until passed to their `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use funcgnn::aig::{parse_aag, to_graph_tensors, Aig, GraphTensors};
use funcgnn::batch::GraphBatch;
use funcgnn::checkpoint;
use funcgnn::model::{ForwardOutput, FuncGnn};
use funcgnn::sim::{exact_labels_capped, mc_labels, DEFAULT_EXACT_INPUT_CAP};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Io = 4,
    InvalidArgument = 5,
    BufferTooSmall = 6,
    Numerical = 7,
    Panic = 8,
}

/// Parsed circuit with its model input tensors.
pub struct FgAig {
    aig: Aig,
    graph: GraphTensors,
}

/// Trained model loaded from a checkpoint.
pub struct FgModel {
    model: FuncGnn,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (FgStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FgStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FgStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (FgStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((FgStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FgStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err((FgStatus::NullPointer, "output buffer is null".into()));
    }
    if len < need {
        return Err((FgStatus::BufferTooSmall, format!("buffer holds {len} values, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn write_out<T>(p: *mut T, v: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err((FgStatus::NullPointer, "output pointer is null".into()));
    }
    p.write(v);
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn fg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses ASCII AIGER text into a new handle.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_aig_parse(text: *const c_char, out: *mut *mut FgAig) -> FgStatus {
    guard(|| {
        let text = c_str(text, "text")?;
        let aig = parse_aag(text).map_err(|e| (FgStatus::Parse, e.to_string()))?;
        let graph = to_graph_tensors(&aig, true);
        write_out(out, Box::into_raw(Box::new(FgAig { aig, graph })))
    })
}

/// # Safety
/// `aig` must be null or a handle from `fg_aig_parse` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_aig_free(aig: *mut FgAig) {
    if !aig.is_null() {
        drop(Box::from_raw(aig));
    }
}

/// # Safety
/// `aig` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_aig_num_nodes(aig: *const FgAig, out: *mut usize) -> FgStatus {
    guard(|| write_out(out, deref(aig, "aig")?.aig.num_nodes()))
}

/// # Safety
/// `aig` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_aig_num_inputs(aig: *const FgAig, out: *mut usize) -> FgStatus {
    guard(|| write_out(out, deref(aig, "aig")?.aig.num_inputs()))
}

/// Positive over negative fanin edges, the circuit-level model prior.
///
/// # Safety
/// `aig` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_aig_gate_ratio(aig: *const FgAig, out: *mut f64) -> FgStatus {
    guard(|| write_out(out, deref(aig, "aig")?.graph.gate_ratio))
}

/// Logic level of every node into `out[0..num_nodes]`.
///
/// # Safety
/// `aig` must be a live handle; `out` must hold `len` `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn fg_aig_levels(aig: *const FgAig, out: *mut u32, len: usize) -> FgStatus {
    guard(|| {
        let levels = deref(aig, "aig")?
            .aig
            .levels()
            .map_err(|e| (FgStatus::InvalidArgument, e.to_string()))?;
        if out.is_null() {
            return Err((FgStatus::NullPointer, "output buffer is null".into()));
        }
        if len < levels.len() {
            return Err((
                FgStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", levels.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, levels.len()).copy_from_slice(&levels);
        Ok(())
    })
}

/// Exact signal probability of every node by exhaustive simulation.
/// Fails with `FG_STATUS_INVALID_ARGUMENT` above 16 inputs.
///
/// # Safety
/// `aig` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fg_exact_probs(aig: *const FgAig, out: *mut f64, len: usize) -> FgStatus {
    guard(|| {
        let a = deref(aig, "aig")?;
        let labels = exact_labels_capped(&a.aig, DEFAULT_EXACT_INPUT_CAP)
            .map_err(|e| (FgStatus::InvalidArgument, e.to_string()))?;
        out_slice(out, len, labels.node_probs.len())?.copy_from_slice(&labels.node_probs);
        Ok(())
    })
}

/// Signal probabilities estimated from `n_vectors` seeded random patterns.
///
/// # Safety
/// `aig` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fg_mc_probs(
    aig: *const FgAig,
    n_vectors: usize,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> FgStatus {
    guard(|| {
        let a = deref(aig, "aig")?;
        let labels = mc_labels(&a.aig, n_vectors, seed).map_err(|e| (FgStatus::InvalidArgument, e.to_string()))?;
        out_slice(out, len, labels.node_probs.len())?.copy_from_slice(&labels.node_probs);
        Ok(())
    })
}

/// Loads a checkpoint file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_model_load(path: *const c_char, out: *mut *mut FgModel) -> FgStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let model = checkpoint::load(Path::new(path)).map_err(|e| match e {
            checkpoint::CheckpointError::Io(_) => (FgStatus::Io, e.to_string()),
            _ => (FgStatus::Parse, e.to_string()),
        })?;
        write_out(out, Box::into_raw(Box::new(FgModel { model })))
    })
}

/// # Safety
/// `model` must be null or a handle from `fg_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_model_free(model: *mut FgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width of the model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_model_hidden(model: *const FgModel, out: *mut usize) -> FgStatus {
    guard(|| write_out(out, deref(model, "model")?.model.config().hidden))
}

fn forward(model: &FgModel, aig: &FgAig) -> Result<ForwardOutput, Failure> {
    let batch = GraphBatch::new(&[&aig.graph], model.model.scaler())
        .map_err(|e| (FgStatus::InvalidArgument, e.to_string()))?;
    let out = model
        .model
        .predict(&batch)
        .map_err(|e| (FgStatus::InvalidArgument, e.to_string()))?;
    if out.spp.iter().any(|p| !p.is_finite()) {
        return Err((FgStatus::Numerical, "non-finite prediction".into()));
    }
    Ok(out)
}

/// Predicted signal probability of every node.
///
/// # Safety
/// `model` and `aig` must be live handles; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fg_model_predict_spp(
    model: *const FgModel,
    aig: *const FgAig,
    out: *mut f64,
    len: usize,
) -> FgStatus {
    guard(|| {
        let f = forward(deref(model, "model")?, deref(aig, "aig")?)?;
        out_slice(out, len, f.spp.len())?.copy_from_slice(&f.spp);
        Ok(())
    })
}

/// Node embeddings, row-major `num_nodes x hidden`.
///
/// # Safety
/// `model` and `aig` must be live handles; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fg_model_embed(
    model: *const FgModel,
    aig: *const FgAig,
    out: *mut f64,
    len: usize,
) -> FgStatus {
    guard(|| {
        let f = forward(deref(model, "model")?, deref(aig, "aig")?)?;
        let z = f.embeddings.data();
        out_slice(out, len, z.len())?.copy_from_slice(z);
        Ok(())
    })
}
