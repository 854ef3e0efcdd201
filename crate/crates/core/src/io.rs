//! Shared CSV formatting.

/// Whether wall-clock columns are filled in. Omitting them keeps output
/// byte-identical across runs with the same seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimingMode {
    Record,
    #[default]
    Omit,
}

/// Round-trip precision (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub(crate) fn fmt_time(v: f64, timing: TimingMode) -> String {
    match timing {
        TimingMode::Record => fmt_f64(v),
        TimingMode::Omit => String::new(),
    }
}
