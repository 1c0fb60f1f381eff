//! C ABI for the shefluct toolkit.
//!
//! Objects cross the boundary as opaque handles created by a `*_new` (or
//! `*_from_*`) function and released with the matching `*_free`. Every
//! fallible call returns a [`ShefluctStatus`]; on failure the message is kept
//! per thread and can be read with [`shefluct_last_error`].
//!
//! Arrays are passed as pointer plus length. Matrices are row-major; a d×m
//! matrix has `d*m` entries and slopes or weights of shape d×m×d have
//! `d*m*d` entries indexed `(i*m + j)*d + k`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use shefluct::config::{ExperimentConfig, Prepared};
use shefluct::experiments::run;
use shefluct::observables::spatial_average;
use shefluct::oracles::{constant_sigma_law, pam_second_moment};
use shefluct::report::{write_outputs, Batch, ExperimentReport};
use shefluct::stats::Matrix;
use shefluct::{check_h1, simulate, DiffusionField, Error, Grid, GridSpec, SigmaFamily};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShefluctStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid configuration, shape or domain.
    InvalidArgument = 2,
    /// Numerical failure, including a singular covariance.
    Numerical = 3,
    /// File system error.
    Io = 4,
    /// Serialization error.
    Serialization = 5,
    /// The output buffer is too small; the error message states the size needed.
    BufferTooSmall = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

/// A diffusion coefficient σ.
pub struct ShefluctField {
    inner: DiffusionField,
}

/// A space-time grid.
pub struct ShefluctGrid {
    inner: Grid,
}

/// A validated experiment configuration.
pub struct ShefluctExperiment {
    inner: Prepared,
}

/// The result of running an experiment.
pub struct ShefluctReport {
    report: ExperimentReport,
    batch: Option<Batch>,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ShefluctStatus {
    match e {
        Error::Config(_) | Error::Domain(_) => ShefluctStatus::InvalidArgument,
        Error::Numerical(_) | Error::Singular { .. } => ShefluctStatus::Numerical,
        Error::Io(_) => ShefluctStatus::Io,
        Error::Serde(_) => ShefluctStatus::Serialization,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
    Small(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ShefluctStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ShefluctStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            ShefluctStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Small(msg))) => {
            set_error(msg);
            ShefluctStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".to_string());
            ShefluctStatus::Internal
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::Config(format!("{what} is not valid UTF-8"))))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn drop_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn shefluct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn shefluct_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// σ ≡ S with `s` of length `d*m`.
///
/// # Safety
/// `s` must be valid for `d*m` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_constant(d: usize, m: usize, s: *const f64, out: *mut *mut ShefluctField) -> ShefluctStatus {
    guard(|| {
        let s = slice(s, d * m, "s")?.to_vec();
        put(out, ShefluctField { inner: DiffusionField::constant(d, m, s)? }, "out")
    })
}

/// σ_ij(u) = a_ij + Σ_k b_ijk u_k.
///
/// # Safety
/// `a` must be valid for `d*m` reads, `b` for `d*m*d` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_affine(
    d: usize,
    m: usize,
    a: *const f64,
    b: *const f64,
    out: *mut *mut ShefluctField,
) -> ShefluctStatus {
    guard(|| {
        let a = slice(a, d * m, "a")?.to_vec();
        let b = slice(b, d * m * d, "b")?.to_vec();
        put(out, ShefluctField { inner: DiffusionField::affine(d, m, a, b)? }, "out")
    })
}

/// σ_ij(u) = a_ij + c_ij·sin(Σ_k w_ijk u_k).
///
/// # Safety
/// `a` and `c` must be valid for `d*m` reads, `w` for `d*m*d` reads and `out`
/// for one write.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_bounded_smooth(
    d: usize,
    m: usize,
    a: *const f64,
    c: *const f64,
    w: *const f64,
    out: *mut *mut ShefluctField,
) -> ShefluctStatus {
    guard(|| {
        let a = slice(a, d * m, "a")?.to_vec();
        let c = slice(c, d * m, "c")?.to_vec();
        let w = slice(w, d * m * d, "w")?.to_vec();
        put(out, ShefluctField { inner: DiffusionField::bounded_smooth(d, m, a, c, w)? }, "out")
    })
}

/// # Safety
/// `field` must be null or a handle from a `shefluct_field_*` constructor that
/// has not been freed.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_free(field: *mut ShefluctField) {
    drop_handle(field)
}

/// Writes the state dimension `d` and the noise dimension `m`.
///
/// # Safety
/// `field` must be a live handle; `d` and `m` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_dims(field: *const ShefluctField, d: *mut usize, m: *mut usize) -> ShefluctStatus {
    guard(|| {
        let f = &handle(field, "field")?.inner;
        if d.is_null() || m.is_null() {
            return Err(Fail::Null("d, m"));
        }
        *d = f.d();
        *m = f.m();
        Ok(())
    })
}

/// Evaluates σ(u) into `out` (`d*m` entries, row-major).
///
/// # Safety
/// `u` must be valid for `d` reads and `out` for `d*m` writes.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_sigma(field: *const ShefluctField, u: *const f64, out: *mut f64) -> ShefluctStatus {
    guard(|| {
        let f = &handle(field, "field")?.inner;
        let u = slice(u, f.d(), "u")?;
        let out = slice_mut(out, f.d() * f.m(), "out")?;
        f.sigma_into(u, out);
        Ok(())
    })
}

/// Non-degeneracy at the all-ones state: whether the columns of σ(1̄) span
/// ℝᵈ, and their numerical rank.
///
/// # Safety
/// `holds` and `rank` must be valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_check_h1(field: *const ShefluctField, holds: *mut bool, rank: *mut usize) -> ShefluctStatus {
    guard(|| {
        let f = &handle(field, "field")?.inner;
        if holds.is_null() || rank.is_null() {
            return Err(Fail::Null("holds, rank"));
        }
        let c = check_h1(f);
        *holds = c.holds;
        *rank = c.rank;
        Ok(())
    })
}

/// A grid on `[0, t_final]` wide enough for averages up to radius `r_max`.
///
/// # Safety
/// `output_times` must be valid for `n_output` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn shefluct_grid_new(
    t_final: f64,
    dt: f64,
    dx: f64,
    r_max: f64,
    padding: f64,
    output_times: *const f64,
    n_output: usize,
    out: *mut *mut ShefluctGrid,
) -> ShefluctStatus {
    guard(|| {
        let times = slice(output_times, n_output, "output_times")?.to_vec();
        let grid = Grid::new(&GridSpec {
            t_final,
            dt,
            dx,
            r_max,
            padding,
            output_times: times,
        })?;
        put(out, ShefluctGrid { inner: grid }, "out")
    })
}

/// # Safety
/// `grid` must be null or a live handle from [`shefluct_grid_new`].
#[no_mangle]
pub unsafe extern "C" fn shefluct_grid_free(grid: *mut ShefluctGrid) {
    drop_handle(grid)
}

/// Number of interior nodes and of time steps.
///
/// # Safety
/// `grid` must be a live handle; `nx` and `nt` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn shefluct_grid_shape(grid: *const ShefluctGrid, nx: *mut usize, nt: *mut usize) -> ShefluctStatus {
    guard(|| {
        let g = &handle(grid, "grid")?.inner;
        if nx.is_null() || nt.is_null() {
            return Err(Fail::Null("nx, nt"));
        }
        *nx = g.nx();
        *nt = g.nt();
        Ok(())
    })
}

/// Simulates one replica and writes the field at the last output time,
/// component-major (`d*nx` entries), into `out`.
///
/// # Safety
/// Handles must be live and `out` valid for `d*nx` writes.
#[no_mangle]
pub unsafe extern "C" fn shefluct_simulate_final(
    field: *const ShefluctField,
    grid: *const ShefluctGrid,
    seed: u64,
    replica_id: u64,
    out: *mut f64,
) -> ShefluctStatus {
    guard(|| {
        let f = &handle(field, "field")?.inner;
        let g = &handle(grid, "grid")?.inner;
        let states = simulate(f, g, seed, replica_id)?;
        let last = states
            .last()
            .ok_or_else(|| Error::Config("the grid has no output times".to_string()))?;
        slice_mut(out, last.values.len(), "out")?.copy_from_slice(&last.values);
        Ok(())
    })
}

/// Simulates one replica and writes the spatial average `F^R` at the last
/// output time (`d` entries) into `out`.
///
/// # Safety
/// Handles must be live and `out` valid for `d` writes.
#[no_mangle]
pub unsafe extern "C" fn shefluct_spatial_average_final(
    field: *const ShefluctField,
    grid: *const ShefluctGrid,
    r: f64,
    seed: u64,
    replica_id: u64,
    out: *mut f64,
) -> ShefluctStatus {
    guard(|| {
        let f = &handle(field, "field")?.inner;
        let g = &handle(grid, "grid")?.inner;
        g.window_range(r)?;
        let states = simulate(f, g, seed, replica_id)?;
        let last = states
            .last()
            .ok_or_else(|| Error::Config("the grid has no output times".to_string()))?;
        let avg = spatial_average(last, g, r)?;
        slice_mut(out, avg.len(), "out")?.copy_from_slice(&avg);
        Ok(())
    })
}

/// Limit `C(t)` and prelimit `C^R(t)` covariances (`d*d` entries each) for
/// constant σ = S of shape d×m.
///
/// # Safety
/// `s` must be valid for `d*m` reads; `c` and `cr` for `d*d` writes.
#[no_mangle]
pub unsafe extern "C" fn shefluct_constant_covariance(
    d: usize,
    m: usize,
    s: *const f64,
    t: f64,
    r: f64,
    c: *mut f64,
    cr: *mut f64,
) -> ShefluctStatus {
    guard(|| {
        let s = Matrix::from_rows(d, m, slice(s, d * m, "s")?.to_vec())?;
        let law = constant_sigma_law(&s, t, r)?;
        slice_mut(c, d * d, "c")?.copy_from_slice(&law.c.matrix().data);
        slice_mut(cr, d * d, "cr")?.copy_from_slice(&law.cr.matrix().data);
        Ok(())
    })
}

/// `E[u(t,x)²]` for the scalar equation with σ(u) = λu and u(0) ≡ 1.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn shefluct_pam_second_moment(lambda: f64, t: f64, tol: f64, out: *mut f64) -> ShefluctStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let sol = pam_second_moment(lambda, t, 64, tol)?;
        *out = sol.value_at(t)?;
        Ok(())
    })
}

/// Parses and validates a TOML experiment configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn shefluct_experiment_from_toml(toml: *const c_char, out: *mut *mut ShefluctExperiment) -> ShefluctStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml_str(text(toml, "toml")?, &[])?;
        put(out, ShefluctExperiment { inner: cfg.prepare()? }, "out")
    })
}

/// Applies a dotted `KEY=VALUE` override and revalidates.
///
/// # Safety
/// `experiment` must be a live handle and `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn shefluct_experiment_override(experiment: *mut ShefluctExperiment, assignment: *const c_char) -> ShefluctStatus {
    guard(|| {
        let exp = experiment.as_mut().ok_or(Fail::Null("experiment"))?;
        let assignment = text(assignment, "assignment")?.to_string();
        let base = exp.inner.config.to_toml_string()?;
        let cfg = ExperimentConfig::from_toml_str(&base, &[assignment])?;
        exp.inner = cfg.prepare()?;
        Ok(())
    })
}

/// # Safety
/// `experiment` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shefluct_experiment_free(experiment: *mut ShefluctExperiment) {
    drop_handle(experiment)
}

/// Copies the configuration content hash (64 hex digits plus NUL) into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn shefluct_experiment_hash(experiment: *const ShefluctExperiment, buf: *mut c_char, len: usize) -> ShefluctStatus {
    guard(|| {
        let h = handle(experiment, "experiment")?.inner.config.content_hash();
        copy_str(&h, buf, len)
    })
}

unsafe fn copy_str(s: &str, buf: *mut c_char, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(Fail::Null("buf"));
    }
    if len <= s.len() {
        return Err(Fail::Small(format!("buffer of {len} bytes, {} needed", s.len() + 1)));
    }
    ptr::copy_nonoverlapping(s.as_ptr().cast(), buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Runs the experiment.
///
/// # Safety
/// `experiment` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn shefluct_experiment_run(experiment: *const ShefluctExperiment, out: *mut *mut ShefluctReport) -> ShefluctStatus {
    guard(|| {
        let p = &handle(experiment, "experiment")?.inner;
        let (report, batch) = run(p)?;
        let json = serde_json::to_string(&report).map_err(Error::from)?;
        let json = CString::new(json).map_err(|e| Error::Serde(e.to_string()))?;
        put(out, ShefluctReport { report, batch, json }, "out")
    })
}

/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shefluct_report_free(report: *mut ShefluctReport) {
    drop_handle(report)
}

/// The report as a JSON document. The pointer stays valid until the report
/// is freed.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn shefluct_report_json(report: *const ShefluctReport) -> *const c_char {
    match report.as_ref() {
        Some(r) => r.json.as_ptr(),
        None => {
            set_error("null pointer: report".to_string());
            ptr::null()
        }
    }
}

/// Writes `report.json`, `replicas.json` and the CSV tables into `directory`.
///
/// # Safety
/// `report` must be a live handle and `directory` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn shefluct_report_write(report: *const ShefluctReport, directory: *const c_char) -> ShefluctStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let dir = Path::new(text(directory, "directory")?);
        write_outputs(dir, &r.report, r.batch.as_ref(), &r.report.config.output.formats)?;
        Ok(())
    })
}

/// Number of rows and columns of the named table, e.g. `"entries"`.
///
/// # Safety
/// `report` must be a live handle, `name` a NUL-terminated string, `rows`
/// and `cols` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn shefluct_report_table_shape(
    report: *const ShefluctReport,
    name: *const c_char,
    rows: *mut usize,
    cols: *mut usize,
) -> ShefluctStatus {
    guard(|| {
        let t = table(report, name)?;
        if rows.is_null() || cols.is_null() {
            return Err(Fail::Null("rows, cols"));
        }
        *rows = t.rows.len();
        *cols = t.columns.len();
        Ok(())
    })
}

/// Copies the named table row-major as doubles into `out` (`rows*cols`
/// entries). Integer cells are converted.
///
/// # Safety
/// `report` must be a live handle, `name` a NUL-terminated string and `out`
/// valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn shefluct_report_table_values(
    report: *const ShefluctReport,
    name: *const c_char,
    out: *mut f64,
    len: usize,
) -> ShefluctStatus {
    guard(|| {
        let t = table(report, name)?;
        let n = t.rows.len() * t.columns.len();
        if len < n {
            return Err(Fail::Small(format!("buffer of {len} values, {n} needed")));
        }
        let out = slice_mut(out, n, "out")?;
        for (o, c) in out.iter_mut().zip(t.rows.iter().flatten()) {
            *o = c.as_f64();
        }
        Ok(())
    })
}

unsafe fn table<'a>(report: *const ShefluctReport, name: *const c_char) -> Result<&'a shefluct::report::Table, Fail> {
    let r = handle(report, "report")?;
    let name = text(name, "name")?;
    r.report
        .table(name)
        .ok_or_else(|| Fail::Core(Error::Config(format!("report has no table named '{name}'"))))
}

/// Tag of the model family of a field: 0 constant, 1 affine, 2 bounded-smooth.
///
/// # Safety
/// `field` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn shefluct_field_family(field: *const ShefluctField) -> i32 {
    match field.as_ref().map(|f| f.inner.family()) {
        Some(SigmaFamily::Constant { .. }) => 0,
        Some(SigmaFamily::Affine { .. }) => 1,
        Some(SigmaFamily::BoundedSmooth { .. }) => 2,
        None => -1,
    }
}
