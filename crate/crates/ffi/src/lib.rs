//! C ABI for the interpretation engine. Opaque handles own the Rust
//! objects; every fallible call returns a status code and records a
//! message retrievable with `vitinterp_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;
use std::ptr;
use vitinterp::error::Error;
use vitinterp::image_io::{decode_image, preprocess, write_image};
use vitinterp::loss::LossSpec;
use vitinterp::render::render_overlay;
use vitinterp::rollout::{interpret, CorrectionScheme, SaliencyMap};
use vitinterp::vit::ModelWeights;
use vitinterp::weights_io::load_weights;

/// Call succeeded.
pub const VITINTERP_OK: c_int = 0;
/// Invalid argument (bad enum value, class pair, null pointer).
pub const VITINTERP_EINVAL: c_int = 1;
/// Data error (unreadable file, malformed container, numeric guard).
pub const VITINTERP_EDATA: c_int = 2;

/// Correction scheme selectors.
pub const VITINTERP_SCHEME_POSITIVE: c_int = 0;
pub const VITINTERP_SCHEME_COMPLETE: c_int = 1;
pub const VITINTERP_SCHEME_ABSOLUTE: c_int = 2;

/// Loss form selectors. Single-logit uses `c1`; the contrastive forms
/// use `c1` and `c2`.
pub const VITINTERP_LOSS_SINGLE: c_int = 0;
pub const VITINTERP_LOSS_DIFF: c_int = 1;
pub const VITINTERP_LOSS_RATIO: c_int = 2;
pub const VITINTERP_LOSS_NDIFF: c_int = 3;

/// Opaque model handle.
pub struct VitModel {
    weights: ModelWeights,
}

/// Opaque saliency handle.
pub struct VitSaliency {
    map: SaliencyMap,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> c_int {
    match err {
        Error::InvalidArgument(_)
        | Error::ClassesMustDiffer(_)
        | Error::ClassOutOfRange { .. }
        | Error::InvalidConfig(_)
        | Error::DegenerateLayout(_) => VITINTERP_EINVAL,
        _ => VITINTERP_EDATA,
    }
}

fn fail(err: Error) -> c_int {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

fn einval(msg: &str) -> c_int {
    set_error(msg.to_string());
    VITINTERP_EINVAL
}

/// # Safety
/// `ptr` must be a NUL-terminated string or null.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<String, c_int> {
    if ptr.is_null() {
        return Err(einval(&format!("{what} is null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => Err(einval(&format!("{what} is not valid UTF-8"))),
    }
}

fn scheme_arg(scheme: c_int) -> Result<CorrectionScheme, c_int> {
    match scheme {
        VITINTERP_SCHEME_POSITIVE => Ok(CorrectionScheme::Positive),
        VITINTERP_SCHEME_COMPLETE => Ok(CorrectionScheme::Complete),
        VITINTERP_SCHEME_ABSOLUTE => Ok(CorrectionScheme::Absolute),
        _ => Err(einval("unknown scheme selector")),
    }
}

fn loss_arg(kind: c_int, c1: usize, c2: usize) -> Result<LossSpec, c_int> {
    let spec = match kind {
        VITINTERP_LOSS_SINGLE => LossSpec::SingleLogit { target: c1 },
        VITINTERP_LOSS_DIFF => LossSpec::Diff { c1, c2 },
        VITINTERP_LOSS_RATIO => LossSpec::Ratio { c1, c2 },
        VITINTERP_LOSS_NDIFF => LossSpec::NormalizedDiff { c1, c2 },
        _ => return Err(einval("unknown loss selector")),
    };
    Ok(spec)
}

/// Message for the most recent error on this thread, or null if the
/// last call succeeded. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn vitinterp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(ptr::null())
    })
}

/// Load a weight container. Returns a handle, or null with the error
/// recorded.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_model_load(path: *const c_char) -> *mut VitModel {
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(_) => return ptr::null_mut(),
    };
    match load_weights(Path::new(&path)) {
        Ok(weights) => Box::into_raw(Box::new(VitModel { weights })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `model` must be a handle from `vitinterp_model_load` (or null).
#[no_mangle]
pub unsafe extern "C" fn vitinterp_model_free(model: *mut VitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Patch-token count of the model (saliency length).
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_model_num_patches(model: *const VitModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).weights.config.num_patches()
}

/// Class count of the model head.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_model_num_classes(model: *const VitModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).weights.config.num_classes
}

unsafe fn interpret_impl(
    model: *const VitModel,
    image_path: *const c_char,
    scheme: c_int,
    loss_kind: c_int,
    c1: usize,
    c2: usize,
) -> Result<(SaliencyMap, String), c_int> {
    if model.is_null() {
        return Err(einval("model is null"));
    }
    let image_path = path_arg(image_path, "image path")?;
    let scheme = scheme_arg(scheme)?;
    let spec = loss_arg(loss_kind, c1, c2)?;
    let w = &(*model).weights;
    let raw = decode_image(Path::new(&image_path)).map_err(fail)?;
    let mean = [0.5, 0.5, 0.5];
    let std = [0.5, 0.5, 0.5];
    let img = preprocess(&raw, &w.config, &mean, &std, &image_path).map_err(fail)?;
    let s = interpret(w, &img, &spec, scheme).map_err(fail)?;
    Ok((s, image_path))
}

/// Interpret an image file and return a saliency handle through `out`.
/// Preprocessing uses mean 0.5 / std 0.5 per channel.
///
/// # Safety
/// `model` must be a valid handle, `image_path` a NUL-terminated
/// string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_interpret(
    model: *const VitModel,
    image_path: *const c_char,
    scheme: c_int,
    loss_kind: c_int,
    c1: usize,
    c2: usize,
    out: *mut *mut VitSaliency,
) -> c_int {
    if out.is_null() {
        return einval("out is null");
    }
    match interpret_impl(model, image_path, scheme, loss_kind, c1, c2) {
        Ok((map, _)) => {
            *out = Box::into_raw(Box::new(VitSaliency { map }));
            VITINTERP_OK
        }
        Err(code) => code,
    }
}

/// Interpret an image file and write the rendered heatmap overlay
/// (alpha 0.5) next to it.
///
/// # Safety
/// Pointer arguments as for `vitinterp_interpret`; `out_path` must be
/// a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_interpret_to_image(
    model: *const VitModel,
    image_path: *const c_char,
    scheme: c_int,
    loss_kind: c_int,
    c1: usize,
    c2: usize,
    out_path: *const c_char,
) -> c_int {
    let out_path = match path_arg(out_path, "output path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match interpret_impl(model, image_path, scheme, loss_kind, c1, c2) {
        Ok((map, image_path)) => {
            let base = match decode_image(Path::new(&image_path)) {
                Ok(raw) => raw,
                Err(e) => return fail(e),
            };
            let rendered = match render_overlay(&map, &base, 0.5) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            match write_image(&rendered, Path::new(&out_path)) {
                Ok(()) => VITINTERP_OK,
                Err(e) => fail(e),
            }
        }
        Err(code) => code,
    }
}

/// Number of per-patch scores in the map.
///
/// # Safety
/// `saliency` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_saliency_len(saliency: *const VitSaliency) -> usize {
    if saliency.is_null() {
        return 0;
    }
    (*saliency).map.len()
}

/// 1 when the map was all-zero before normalization, else 0.
///
/// # Safety
/// `saliency` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_saliency_degenerate(saliency: *const VitSaliency) -> c_int {
    if !saliency.is_null() && (*saliency).map.degenerate {
        1
    } else {
        0
    }
}

unsafe fn copy_scores(values: &[f64], out: *mut c_double, len: usize) -> c_int {
    if out.is_null() {
        return einval("out is null");
    }
    if len < values.len() {
        return einval("output buffer too small");
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    VITINTERP_OK
}

/// Copy the raw signed scores into `out` (capacity `len`).
///
/// # Safety
/// `saliency` must be a valid handle and `out` must point to at least
/// `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_saliency_scores(
    saliency: *const VitSaliency,
    out: *mut c_double,
    len: usize,
) -> c_int {
    if saliency.is_null() {
        return einval("saliency is null");
    }
    copy_scores(&(*saliency).map.scores, out, len)
}

/// Copy the max-abs-normalized scores (range [-1, 1]) into `out`.
///
/// # Safety
/// As for `vitinterp_saliency_scores`.
#[no_mangle]
pub unsafe extern "C" fn vitinterp_saliency_normalized(
    saliency: *const VitSaliency,
    out: *mut c_double,
    len: usize,
) -> c_int {
    if saliency.is_null() {
        return einval("saliency is null");
    }
    copy_scores(&(*saliency).map.normalized, out, len)
}

/// # Safety
/// `saliency` must be a handle from this library (or null).
#[no_mangle]
pub unsafe extern "C" fn vitinterp_saliency_free(saliency: *mut VitSaliency) {
    if !saliency.is_null() {
        drop(Box::from_raw(saliency));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use vitinterp::image_io::{encode_ppm, RawImage};
    use vitinterp::plant::{left_half_region, plant_model, right_half_region, ClassRegions};
    use vitinterp::vit::ModelConfig;
    use vitinterp::weights_io::save_weights;

    fn fixture() -> (tempfile::TempDir, CString, CString) {
        let dir = tempfile::TempDir::new().unwrap();
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 4,
            channels: 1,
        };
        let mut regions = ClassRegions::new();
        regions.insert(0, left_half_region(&cfg));
        regions.insert(1, right_half_region(&cfg));
        let w = plant_model(&cfg, &regions, 1).unwrap();
        let wpath = dir.path().join("model.bin");
        save_weights(&w, &wpath).unwrap();
        let mut pixels = Vec::new();
        for _y in 0..16 {
            for x in 0..16 {
                let v = if x < 8 { 220 } else { 30 };
                pixels.extend_from_slice(&[v, v, v]);
            }
        }
        let ipath = dir.path().join("in.ppm");
        std::fs::write(&ipath, encode_ppm(&RawImage::new(16, 16, pixels))).unwrap();
        let w = CString::new(wpath.to_str().unwrap()).unwrap();
        let i = CString::new(ipath.to_str().unwrap()).unwrap();
        (dir, w, i)
    }

    #[test]
    fn load_interpret_read_free() {
        let (_dir, wpath, ipath) = fixture();
        unsafe {
            let model = vitinterp_model_load(wpath.as_ptr());
            assert!(!model.is_null());
            assert_eq!(vitinterp_model_num_patches(model), 16);
            assert_eq!(vitinterp_model_num_classes(model), 4);

            let mut sal: *mut VitSaliency = ptr::null_mut();
            let rc = vitinterp_interpret(
                model,
                ipath.as_ptr(),
                VITINTERP_SCHEME_COMPLETE,
                VITINTERP_LOSS_SINGLE,
                0,
                0,
                &mut sal,
            );
            assert_eq!(rc, VITINTERP_OK);
            assert_eq!(vitinterp_saliency_len(sal), 16);
            let mut buf = vec![0.0f64; 16];
            assert_eq!(
                vitinterp_saliency_normalized(sal, buf.as_mut_ptr(), buf.len()),
                VITINTERP_OK
            );
            assert!(buf.iter().any(|&v| v != 0.0));
            assert_eq!(vitinterp_saliency_degenerate(sal), 0);
            vitinterp_saliency_free(sal);
            vitinterp_model_free(model);
        }
    }

    #[test]
    fn bad_path_sets_error() {
        let missing = CString::new("/nonexistent/model.bin").unwrap();
        unsafe {
            let model = vitinterp_model_load(missing.as_ptr());
            assert!(model.is_null());
            let msg = vitinterp_last_error();
            assert!(!msg.is_null());
            assert!(!CStr::from_ptr(msg).to_str().unwrap().is_empty());
        }
    }

    #[test]
    fn equal_classes_is_einval() {
        let (_dir, wpath, ipath) = fixture();
        unsafe {
            let model = vitinterp_model_load(wpath.as_ptr());
            let mut sal: *mut VitSaliency = ptr::null_mut();
            let rc = vitinterp_interpret(
                model,
                ipath.as_ptr(),
                VITINTERP_SCHEME_COMPLETE,
                VITINTERP_LOSS_DIFF,
                2,
                2,
                &mut sal,
            );
            assert_eq!(rc, VITINTERP_EINVAL);
            assert!(sal.is_null());
            vitinterp_model_free(model);
        }
    }

    #[test]
    fn render_to_file() {
        let (dir, wpath, ipath) = fixture();
        let out = CString::new(dir.path().join("heat.png").to_str().unwrap()).unwrap();
        unsafe {
            let model = vitinterp_model_load(wpath.as_ptr());
            let rc = vitinterp_interpret_to_image(
                model,
                ipath.as_ptr(),
                VITINTERP_SCHEME_POSITIVE,
                VITINTERP_LOSS_SINGLE,
                0,
                0,
                out.as_ptr(),
            );
            assert_eq!(rc, VITINTERP_OK);
            vitinterp_model_free(model);
        }
        assert!(dir.path().join("heat.png").exists());
    }
}
