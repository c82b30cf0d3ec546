//! Helpers for writing JSON with reproducible float formatting.
//!
//! Files this crate emits (checkpoints, datasets) serialize every float with
//! 17 significant digits, which round-trips any f64 exactly through a
//! standard JSON parser.

/// Formats a finite f64 with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    debug_assert!(x.is_finite(), "refusing to serialize non-finite float");
    format!("{x:.16e}")
}

/// Writes `[v0,v1,...]` with exact float formatting.
pub fn fmt_f64_array(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 24 + 2);
    s.push('[');
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(v));
    }
    s.push(']');
    s
}

/// Escapes a string for inclusion in a JSON document.
pub fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
