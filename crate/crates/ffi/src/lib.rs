//! C ABI over the streaming engine and latency metrics.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` and released by
//! the matching `*_free`. Every fallible call returns a [`SimulstStatus`];
//! the message of the last failure on the calling thread is available from
//! [`simulst_last_error`]. Buffers are caller-owned: functions copy at most
//! `cap` elements and report the full length through an out-parameter.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use simulst::metrics::{average_lagging, average_proportion, LatencyRecord};
use simulst::model::{Model, WAIT_ALL};
use simulst::simul::{Action, PolicyConfig, StreamSession};
use simulst::train::Checkpoint;
use simulst::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Fingerprint = 5,
    Numeric = 6,
    StreamEnded = 7,
    Panic = 8,
}

/// Kind of action taken by [`simulst_session_step`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulstAction {
    Read = 0,
    Write = 1,
    Finish = 2,
    /// More frames are needed before the next action.
    NeedInput = 3,
}

/// `k` value meaning "wait for the whole source".
pub const SIMULST_WAIT_ALL: usize = !0;

/// A loaded model.
pub struct SimulstModel {
    model: Arc<Model>,
}

/// One streaming translation.
pub struct SimulstSession {
    // Declared first so it is dropped before the model it borrows.
    session: StreamSession<'static>,
    _model: Arc<Model>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SimulstStatus {
    match e {
        Error::Io { .. } => SimulstStatus::Io,
        Error::Format { .. } | Error::Parse { .. } | Error::Json(_) => SimulstStatus::Format,
        Error::Fingerprint { .. } => SimulstStatus::Fingerprint,
        Error::NonFinite(_) => SimulstStatus::Numeric,
        Error::StreamEnded => SimulstStatus::StreamEnded,
        _ => SimulstStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SimulstStatus, String)>) -> SimulstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SimulstStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            SimulstStatus::Panic
        }
    }
}

fn fail(e: Error) -> (SimulstStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SimulstStatus, String) {
    (SimulstStatus::NullPointer, format!("{what} is null"))
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, cap: usize, len: *mut usize) -> Result<(), (SimulstStatus, String)> {
    if len.is_null() {
        return Err(null("length out-parameter"));
    }
    *len = src.len();
    let n = src.len().min(cap);
    if n > 0 {
        if buf.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, n);
    }
    Ok(())
}

/// Copies the last error message of this thread as a NUL-terminated
/// string into `buf` (truncated to `cap` bytes) and returns the number of
/// bytes the full message needs, including the terminator.
#[no_mangle]
pub unsafe extern "C" fn simulst_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a training checkpoint.
#[no_mangle]
pub unsafe extern "C" fn simulst_model_load(path: *const c_char, out: *mut *mut SimulstModel) -> SimulstStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("model out-parameter"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SimulstStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(p)).map_err(fail)?;
        *out = Box::into_raw(Box::new(SimulstModel { model: Arc::new(ckpt.model) }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn simulst_model_free(model: *mut SimulstModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension the model expects, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn simulst_model_feature_dim(model: *const SimulstModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.d_feat)
}

/// Milliseconds per encoder frame, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn simulst_model_frame_ms(model: *const SimulstModel) -> f64 {
    model.as_ref().map_or(0.0, |m| m.model.cfg.frame_shift_ms())
}

/// Look-ahead latency of the encoder in milliseconds.
#[no_mangle]
pub unsafe extern "C" fn simulst_model_lookahead_ms(model: *const SimulstModel) -> f64 {
    model.as_ref().map_or(0.0, |m| m.model.cfg.effective_lookahead_ms())
}

/// Starts a session. `k == 0` or `n == 0` selects the values the model was
/// trained with; [`SIMULST_WAIT_ALL`] as `k` decodes full sentences.
#[no_mangle]
pub unsafe extern "C" fn simulst_session_new(
    model: *const SimulstModel,
    k: usize,
    n: usize,
    beam: usize,
    out: *mut *mut SimulstSession,
) -> SimulstStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("session out-parameter"));
        }
        let policy = PolicyConfig {
            k: if k == 0 { m.model.cfg.k } else if k == SIMULST_WAIT_ALL { WAIT_ALL } else { k },
            n: if n == 0 { m.model.cfg.n } else { n },
            beam,
        };
        let model = Arc::clone(&m.model);
        // SAFETY: the session borrows the model behind `model`, an Arc the
        // session struct keeps alive and drops only after the session.
        let borrowed: &'static Model = &*Arc::as_ptr(&model);
        let session = StreamSession::new(borrowed, policy).map_err(fail)?;
        *out = Box::into_raw(Box::new(SimulstSession { session, _model: model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn simulst_session_free(session: *mut SimulstSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Appends `rows` feature frames (row-major, `rows × feature_dim` floats).
/// `new_segments` (nullable) receives the number of segments completed.
#[no_mangle]
pub unsafe extern "C" fn simulst_session_push(
    session: *mut SimulstSession,
    frames: *const f32,
    rows: usize,
    new_segments: *mut usize,
) -> SimulstStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let dim = s._model.cfg.d_feat;
        let data: &[f32] = if rows == 0 {
            &[]
        } else if frames.is_null() {
            return Err(null("frames"));
        } else {
            std::slice::from_raw_parts(frames, rows * dim)
        };
        let segs = s.session.push_frames(data).map_err(fail)?;
        if let Some(n) = new_segments.as_mut() {
            *n = segs.len();
        }
        Ok(())
    })
}

/// Signals end of input. `new_segments` as in [`simulst_session_push`].
#[no_mangle]
pub unsafe extern "C" fn simulst_session_end(session: *mut SimulstSession, new_segments: *mut usize) -> SimulstStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let segs = s.session.end_stream().map_err(fail)?;
        if let Some(n) = new_segments.as_mut() {
            *n = segs.len();
        }
        Ok(())
    })
}

/// Takes the next action. For a write, up to `cap` committed tokens are
/// copied to `tokens` and `n_tokens` receives their count; otherwise
/// `n_tokens` is 0.
#[no_mangle]
pub unsafe extern "C" fn simulst_session_step(
    session: *mut SimulstSession,
    action: *mut SimulstAction,
    tokens: *mut usize,
    cap: usize,
    n_tokens: *mut usize,
) -> SimulstStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let action = action.as_mut().ok_or_else(|| null("action out-parameter"))?;
        let (kind, written): (SimulstAction, Vec<usize>) = match s.session.step().map_err(fail)? {
            None => (SimulstAction::NeedInput, Vec::new()),
            Some(Action::Read(_)) => (SimulstAction::Read, Vec::new()),
            Some(Action::Write(t)) => (SimulstAction::Write, t),
            Some(Action::Finish) => (SimulstAction::Finish, Vec::new()),
        };
        *action = kind;
        copy_out(&written, tokens, cap, n_tokens)
    })
}

/// Committed target token ids so far.
#[no_mangle]
pub unsafe extern "C" fn simulst_session_hypothesis(
    session: *const SimulstSession,
    buf: *mut usize,
    cap: usize,
    len: *mut usize,
) -> SimulstStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        copy_out(s.session.hypothesis(), buf, cap, len)
    })
}

/// Listening duration in milliseconds of each committed token.
#[no_mangle]
pub unsafe extern "C" fn simulst_session_delays(
    session: *const SimulstSession,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> SimulstStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        copy_out(s.session.delays_ms(), buf, cap, len)
    })
}

/// Encoder frames produced so far.
#[no_mangle]
pub unsafe extern "C" fn simulst_session_source_frames(session: *const SimulstSession) -> usize {
    session.as_ref().map_or(0, |s| s.session.encoded().len())
}

unsafe fn record(
    delays: *const f64,
    n: usize,
    source_frames: usize,
    frame_ms: f64,
    ref_len: usize,
    offset_ms: f64,
) -> Result<LatencyRecord, (SimulstStatus, String)> {
    let delays_ms = if n == 0 {
        Vec::new()
    } else if delays.is_null() {
        return Err(null("delays"));
    } else {
        std::slice::from_raw_parts(delays, n).to_vec()
    };
    Ok(LatencyRecord { delays_ms, source_frames, frame_ms, ref_len, offset_ms })
}

/// Average lagging in milliseconds.
#[no_mangle]
pub unsafe extern "C" fn simulst_average_lagging(
    delays: *const f64,
    n: usize,
    source_frames: usize,
    frame_ms: f64,
    ref_len: usize,
    offset_ms: f64,
    out: *mut f64,
) -> SimulstStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("result out-parameter"))?;
        let rec = record(delays, n, source_frames, frame_ms, ref_len, offset_ms)?;
        *out = average_lagging(&rec).map_err(fail)?;
        Ok(())
    })
}

/// Average proportion in `(0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn simulst_average_proportion(
    delays: *const f64,
    n: usize,
    source_frames: usize,
    frame_ms: f64,
    out: *mut f64,
) -> SimulstStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("result out-parameter"))?;
        let rec = record(delays, n, source_frames, frame_ms, 1, 0.0)?;
        *out = average_proportion(&rec).map_err(fail)?;
        Ok(())
    })
}
