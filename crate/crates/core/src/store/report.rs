use std::fmt;

use serde::Serialize;

use crate::memory::MemoryStore;

/// Bytes needed to keep `units` float32 vectors of length `d`.
pub fn payload_bytes(units: usize, d: usize) -> u64 {
    units as u64 * d as u64 * 4
}

/// Decimal megabytes with two places, rounded half up in integer arithmetic.
pub fn format_megabytes(bytes: u64) -> String {
    let hundredths = (bytes as u128 + 5_000) / 10_000;
    format!("{}.{:02} MB", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    /// `(class id, units)`.
    pub per_class: Vec<(usize, usize)>,
    pub units: usize,
    pub dim: usize,
    pub payload_bytes: u64,
    pub model_bytes: u64,
    pub total_bytes: u64,
}

/// Storage of a memory store plus `model_params` float32 parameters.
pub fn memory_report(store: &MemoryStore, model_params: usize) -> MemoryReport {
    let per_class: Vec<(usize, usize)> = store.classes.iter().map(|(&c, m)| (c, m.unit_count())).collect();
    let units = per_class.iter().map(|p| p.1).sum();
    let dim = store.dim().unwrap_or(0);
    let payload = payload_bytes(units, dim);
    let model = model_params as u64 * 4;
    MemoryReport {
        per_class,
        units,
        dim,
        payload_bytes: payload,
        model_bytes: model,
        total_bytes: payload + model,
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, u) in &self.per_class {
            writeln!(f, "class {c}: {u} units")?;
        }
        writeln!(f, "units: {} (d = {})", self.units, self.dim)?;
        writeln!(
            f,
            "payload: {} bytes ({})",
            self.payload_bytes,
            format_megabytes(self.payload_bytes)
        )?;
        writeln!(f, "model: {} bytes ({})", self.model_bytes, format_megabytes(self.model_bytes))?;
        write!(f, "total: {} bytes ({})", self.total_bytes, format_megabytes(self.total_bytes))
    }
}
