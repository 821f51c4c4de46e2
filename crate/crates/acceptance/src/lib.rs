//! Reference implementations the acceptance checks compare against. They
//! are written from the textbook definitions and share no code with
//! `stopline_core`.

/// Insertion sort. Quadratic, but obviously correct.
pub fn brute_sort(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        let mut i = out.len();
        while i > 0 && out[i - 1] > v {
            i -= 1;
        }
        out.insert(i, v);
    }
    out
}

/// Linear interpolation between closest ranks, `h = (n - 1) q`.
pub fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let sorted = brute_sort(values);
    let h = (sorted.len() - 1) as f64 * q;
    let below = h.floor();
    let (a, b) = (sorted[below as usize], sorted[h.ceil() as usize]);
    if a == b {
        a
    } else {
        a + (b - a) * (h - below)
    }
}

/// A `multipart/form-data` body with one part per field.
pub fn multipart_body(boundary: &str, fields: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, data) in fields {
        body.extend_from_slice(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\r\n").as_bytes());
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    body
}
