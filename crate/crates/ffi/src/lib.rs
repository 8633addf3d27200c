//! C ABI over `mills-core`.
//!
//! Objects cross the boundary as opaque pointers created by `mills_*`
//! constructors and released by the matching `*_free`. Every fallible call
//! returns a [`MillsStatus`]; on failure, [`mills_last_error`] describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mills_core::analytics::{cramer_v, summarize, BivariateSource, Interval, MillsTables};
use mills_core::draws::{self, DrawFormat, StoredDraws};
use mills_core::gibbs::{run_chain, Hyperparams, PosteriorDraws, SamplerConfig};
use mills_core::lca::{fit_latent_class, LcaDraws};
use mills_core::loglinear::PairLayout;
use mills_core::scenario::{generate, ScenarioSpec};
use mills_core::table::{load_dataset, load_schema, CategoricalDataset, PairIndex};
use mills_core::MillsError;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MillsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Numerical = 3,
    Io = 4,
    OutOfRange = 5,
    Panic = 6,
    Other = 7,
}

/// Mixture hyperparameters.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MillsHyper {
    pub components: usize,
    pub sigma2: f64,
    pub a0: f64,
    pub a1: f64,
}

/// Chain settings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MillsSamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chain: u64,
    pub parallel: bool,
}

/// Posterior mean and 2.5% / 97.5% quantiles.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MillsInterval {
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Opaque dataset handle.
pub struct MillsDataset(CategoricalDataset);

enum DrawsInner {
    Mills(PosteriorDraws),
    Lca(LcaDraws),
    Stored(StoredDraws),
}

/// Opaque handle to posterior draws of either model.
pub struct MillsDraws {
    inner: DrawsInner,
    layout: PairLayout,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &MillsError) -> MillsStatus {
    if err.is_input_error() {
        MillsStatus::InvalidInput
    } else if err.is_numerical_error() {
        MillsStatus::Numerical
    } else if matches!(err, MillsError::Io { .. }) {
        MillsStatus::Io
    } else {
        MillsStatus::Other
    }
}

enum Failure {
    Status(MillsStatus, String),
    Core(MillsError),
}

impl From<MillsError> for Failure {
    fn from(e: MillsError) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(MillsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MillsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MillsStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MillsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::Status(MillsStatus::InvalidInput, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: non-null pointers from the caller point to writable storage.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles were produced by this library and not freed.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

fn pair_position(layout: &PairLayout, j: usize, k: usize) -> Result<usize, Failure> {
    let out_of_range = || Failure::Status(MillsStatus::OutOfRange, format!("no pair ({j},{k})"));
    if j == 0 || k == 0 || j >= k {
        return Err(out_of_range());
    }
    let pair = PairIndex::new(j - 1, k - 1).map_err(|_| out_of_range())?;
    layout.position(pair).ok_or_else(out_of_range)
}

impl MillsDraws {
    fn new(inner: DrawsInner) -> Result<Self, MillsError> {
        let levels = match &inner {
            DrawsInner::Mills(d) => d.levels.clone(),
            DrawsInner::Lca(d) => d.levels.clone(),
            DrawsInner::Stored(d) => d.meta.levels.clone(),
        };
        Ok(Self {
            layout: PairLayout::new(&levels)?,
            inner,
        })
    }

    fn source(&self) -> Result<Box<dyn BivariateSource + '_>, MillsError> {
        Ok(match &self.inner {
            DrawsInner::Mills(d) => Box::new(MillsTables::new(d)?),
            DrawsInner::Lca(d) => Box::new(d),
            DrawsInner::Stored(d) => Box::new(d),
        })
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mills_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn mills_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn mills_hyper_default() -> MillsHyper {
    let h = Hyperparams::default();
    MillsHyper {
        components: h.components,
        sigma2: h.sigma2,
        a0: h.a0,
        a1: h.a1,
    }
}

#[no_mangle]
pub extern "C" fn mills_sampler_config_default() -> MillsSamplerConfig {
    let c = SamplerConfig::default();
    MillsSamplerConfig {
        iterations: c.iterations,
        burn_in: c.burn_in,
        thin: c.thin,
        seed: c.seed,
        chain: c.chain,
        parallel: c.parallel,
    }
}

/// Load a CSV dataset; `levels_json` may be null.
///
/// # Safety
/// `path` and a non-null `levels_json` must be NUL-terminated strings;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mills_dataset_load(
    path: *const c_char,
    levels_json: *const c_char,
    out: *mut *mut MillsDataset,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let path = unsafe { path_arg(path, "path") }?;
        let schema = if levels_json.is_null() {
            None
        } else {
            Some(load_schema(&unsafe {
                path_arg(levels_json, "levels_json")
            }?)?)
        };
        let data = load_dataset(&path, schema.as_ref())?;
        *out = Box::into_raw(Box::new(MillsDataset(data)));
        Ok(())
    })
}

/// Build a dataset from `n * p` row-major 1-based codes.
///
/// # Safety
/// `levels` must hold `p` values, `codes` `n * p` values (may be null when
/// `n == 0`); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mills_dataset_from_codes(
    n: usize,
    p: usize,
    levels: *const usize,
    codes: *const u16,
    out: *mut *mut MillsDataset,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        if levels.is_null() || (codes.is_null() && n > 0) {
            return Err(null("levels or codes"));
        }
        // SAFETY: lengths are guaranteed by the caller.
        let levels = unsafe { std::slice::from_raw_parts(levels, p) }.to_vec();
        let codes = if n == 0 {
            Vec::new()
        } else {
            unsafe { std::slice::from_raw_parts(codes, n * p) }.to_vec()
        };
        let data = CategoricalDataset::new(levels, codes)?;
        *out = Box::into_raw(Box::new(MillsDataset(data)));
        Ok(())
    })
}

/// Simulate one of the four scenarios with default knobs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mills_simulate(
    scenario: u8,
    n: usize,
    p: usize,
    d: usize,
    seed: u64,
    out: *mut *mut MillsDataset,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let s = generate(&ScenarioSpec::new(scenario, n, p, d, seed))?;
        *out = Box::into_raw(Box::new(MillsDataset(s.data)));
        Ok(())
    })
}

/// # Safety
/// `data` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn mills_dataset_n(data: *const MillsDataset) -> usize {
    unsafe { data.as_ref() }.map_or(0, |d| d.0.n())
}

/// # Safety
/// `data` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn mills_dataset_p(data: *const MillsDataset) -> usize {
    unsafe { data.as_ref() }.map_or(0, |d| d.0.p())
}

/// Write the dataset as CSV.
///
/// # Safety
/// `data` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mills_dataset_write_csv(
    data: *const MillsDataset,
    path: *const c_char,
) -> MillsStatus {
    guard(|| {
        let data = unsafe { handle(data, "data") }?;
        data.0.write_csv(&unsafe { path_arg(path, "path") }?)?;
        Ok(())
    })
}

/// # Safety
/// `data` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mills_dataset_free(data: *mut MillsDataset) {
    if !data.is_null() {
        // SAFETY: pointer was produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(data) });
    }
}

/// Run one mixture chain.
///
/// # Safety
/// `data`, `hyper` and `config` must be valid pointers; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mills_fit(
    data: *const MillsDataset,
    hyper: *const MillsHyper,
    config: *const MillsSamplerConfig,
    out: *mut *mut MillsDraws,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let data = unsafe { handle(data, "data") }?;
        let h = unsafe { handle(hyper, "hyper") }?;
        let c = unsafe { handle(config, "config") }?;
        let hyper = Hyperparams {
            components: h.components,
            sigma2: h.sigma2,
            a0: h.a0,
            a1: h.a1,
            ..Default::default()
        };
        let draws = run_chain(&data.0, &hyper, &core_config(c))?;
        *out = Box::into_raw(Box::new(MillsDraws::new(DrawsInner::Mills(draws))?));
        Ok(())
    })
}

fn core_config(c: &MillsSamplerConfig) -> SamplerConfig {
    SamplerConfig {
        iterations: c.iterations,
        burn_in: c.burn_in,
        thin: c.thin,
        seed: c.seed,
        chain: c.chain,
        parallel: c.parallel,
        store_allocations: false,
    }
}

/// Run one latent class chain with `classes` classes.
///
/// # Safety
/// `data` and `config` must be valid pointers; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mills_fit_lca(
    data: *const MillsDataset,
    classes: usize,
    config: *const MillsSamplerConfig,
    out: *mut *mut MillsDraws,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let data = unsafe { handle(data, "data") }?;
        let c = unsafe { handle(config, "config") }?;
        let draws = fit_latent_class(&data.0, classes, &core_config(c))?;
        *out = Box::into_raw(Box::new(MillsDraws::new(DrawsInner::Lca(draws))?));
        Ok(())
    })
}

/// Load a draw directory written by the CLI or [`mills_draws_save`].
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mills_draws_load(
    dir: *const c_char,
    out: *mut *mut MillsDraws,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let stored = StoredDraws::load(&unsafe { path_arg(dir, "dir") }?)?;
        *out = Box::into_raw(Box::new(MillsDraws::new(DrawsInner::Stored(stored))?));
        Ok(())
    })
}

/// Save freshly fitted draws; `binary` selects the binary format.
///
/// # Safety
/// `draws` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mills_draws_save(
    draws: *const MillsDraws,
    dir: *const c_char,
    binary: bool,
) -> MillsStatus {
    guard(|| {
        let draws = unsafe { handle(draws, "draws") }?;
        let dir = unsafe { path_arg(dir, "dir") }?;
        let format = if binary {
            DrawFormat::Binary
        } else {
            DrawFormat::Csv
        };
        match &draws.inner {
            DrawsInner::Mills(d) => draws::write_mills(&dir, std::slice::from_ref(d), format)?,
            DrawsInner::Lca(d) => draws::write_lca(&dir, std::slice::from_ref(d), format)?,
            DrawsInner::Stored(_) => {
                return Err(Failure::Status(
                    MillsStatus::InvalidInput,
                    "draws loaded from disk are already saved".into(),
                ))
            }
        };
        Ok(())
    })
}

/// Number of kept draws (0 for a null handle).
///
/// # Safety
/// `draws` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mills_draws_count(draws: *const MillsDraws) -> usize {
    unsafe { draws.as_ref() }
        .and_then(|d| d.source().ok())
        .map_or(0, |s| s.n_draws())
}

/// Posterior mean bivariate table of variables `j < k` (1-based), written
/// row-major into `table` of capacity `len`.
///
/// # Safety
/// `draws` must be a live handle; `table` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mills_draws_bivariate_mean(
    draws: *const MillsDraws,
    j: usize,
    k: usize,
    table: *mut f64,
    len: usize,
) -> MillsStatus {
    guard(|| {
        let draws = unsafe { handle(draws, "draws") }?;
        if table.is_null() {
            return Err(null("table"));
        }
        let e = pair_position(&draws.layout, j, k)?;
        let pair = draws.layout.pairs()[e];
        let summary = summarize(draws.source()?.as_ref(), Some(&[pair]))?;
        let mean = &summary[0].table.mean;
        if len < mean.len() {
            return Err(Failure::Status(
                MillsStatus::OutOfRange,
                format!("table needs {} entries, got {len}", mean.len()),
            ));
        }
        // SAFETY: capacity checked above.
        unsafe { std::slice::from_raw_parts_mut(table, mean.len()) }.copy_from_slice(mean);
        Ok(())
    })
}

/// Posterior summary of the Cramér-V of variables `j < k` (1-based).
///
/// # Safety
/// `draws` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mills_draws_cramer_v(
    draws: *const MillsDraws,
    j: usize,
    k: usize,
    out: *mut MillsInterval,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let draws = unsafe { handle(draws, "draws") }?;
        let e = pair_position(&draws.layout, j, k)?;
        let summary = summarize(draws.source()?.as_ref(), Some(&[draws.layout.pairs()[e]]))?;
        let Interval { mean, q025, q975 } = summary[0].association.interval;
        *out = MillsInterval { mean, q025, q975 };
        Ok(())
    })
}

/// # Safety
/// `draws` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mills_draws_free(draws: *mut MillsDraws) {
    if !draws.is_null() {
        // SAFETY: pointer was produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(draws) });
    }
}

/// Cramér-V of a row-major `d1 x d2` probability table.
///
/// # Safety
/// `table` must hold `d1 * d2` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mills_cramer_v(
    table: *const f64,
    d1: usize,
    d2: usize,
    out: *mut f64,
) -> MillsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        if table.is_null() {
            return Err(null("table"));
        }
        // SAFETY: caller guarantees d1 * d2 entries.
        let t = unsafe { std::slice::from_raw_parts(table, d1 * d2) };
        *out = cramer_v(t, d1, d2)?;
        Ok(())
    })
}
