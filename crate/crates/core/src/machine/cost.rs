use serde::{Deserialize, Serialize};

/// Cycle cost charged for each kind of event.
///
/// The defaults are calibration constants fitted so the three suppressed
/// attack variants land near the per-register cycle counts measured on an
/// i7-5600U at 2.60 GHz (359.9K page fault, 25.4K TSX, 24.0K retpoline).
/// They are a fit, not a hardware prediction. `clflush` is deliberately
/// free: the flush retires without stalling the issuing thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub plain: u64,
    pub simd: u64,
    pub cache_hit: u64,
    pub cache_miss: u64,
    pub clflush: u64,
    pub nm_light: u64,
    pub nm_full: u64,
    pub page_fault_signal: u64,
    pub tsx_begin: u64,
    pub tsx_abort: u64,
    pub retpoline_resolution: u64,
    pub context_switch: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            plain: 1,
            simd: 1,
            cache_hit: 1,
            cache_miss: 1,
            clflush: 0,
            nm_light: 150,
            nm_full: 1_100,
            page_fault_signal: 1_300,
            tsx_begin: 30,
            tsx_abort: 66,
            retpoline_resolution: 89,
            context_switch: 2_000,
        }
    }
}

impl CostModel {
    pub const FIELDS: [&'static str; 12] = [
        "plain",
        "simd",
        "cache_hit",
        "cache_miss",
        "clflush",
        "nm_light",
        "nm_full",
        "page_fault_signal",
        "tsx_begin",
        "tsx_abort",
        "retpoline_resolution",
        "context_switch",
    ];

    /// Every event costs exactly `cycles` (handy for tests).
    pub fn uniform(cycles: u64) -> CostModel {
        CostModel {
            plain: cycles,
            simd: cycles,
            cache_hit: cycles,
            cache_miss: cycles,
            clflush: cycles,
            nm_light: cycles,
            nm_full: cycles,
            page_fault_signal: cycles,
            tsx_begin: cycles,
            tsx_abort: cycles,
            retpoline_resolution: cycles,
            context_switch: cycles,
        }
    }

    /// Mutable access by field name, used for `cost.<name> = <n>` overrides.
    pub fn field_mut(&mut self, name: &str) -> Option<&mut u64> {
        Some(match name {
            "plain" => &mut self.plain,
            "simd" => &mut self.simd,
            "cache_hit" => &mut self.cache_hit,
            "cache_miss" => &mut self.cache_miss,
            "clflush" => &mut self.clflush,
            "nm_light" => &mut self.nm_light,
            "nm_full" => &mut self.nm_full,
            "page_fault_signal" => &mut self.page_fault_signal,
            "tsx_begin" => &mut self.tsx_begin,
            "tsx_abort" => &mut self.tsx_abort,
            "retpoline_resolution" => &mut self.retpoline_resolution,
            "context_switch" => &mut self.context_switch,
            _ => return None,
        })
    }
}
