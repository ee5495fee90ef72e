//! Library half of the `chips` command: acceptance checks, input helpers and
//! exit-code mapping.

pub mod checks;
pub mod exit;
pub mod inputs;

/// Worker count when none is given.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
