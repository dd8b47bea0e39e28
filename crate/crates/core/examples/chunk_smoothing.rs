//! Temporal chunk-wise smoothing on a one-dimensional command stream: a
//! stale-drop, a cross-fade, and the guard that ignores fully stale chunks.

use kai0::control::{naive_switch, smooth_swap, ExecutionBuffer, SmoothingConfig};
use kai0::{ActionChunk, Result};

fn scalars(xs: &[f64]) -> Vec<Vec<f64>> {
    xs.iter().map(|&x| vec![x]).collect()
}

fn show(label: &str, b: &ExecutionBuffer) {
    let r: Vec<String> = b.residual().iter().map(|a| format!("{:.2}", a[0])).collect();
    println!("{label:<22} k={} [{}]", b.k, r.join(", "));
}

fn main() -> Result<()> {
    let cfg = SmoothingConfig {
        d_max: 2,
        m_min: 3,
        ..SmoothingConfig::default()
    };
    // Old plan says "hold at 0", three commands were consumed since the new
    // chunk's observation.
    let old = ExecutionBuffer::new(scalars(&[0.0, 0.0, 0.0, 0.0]), 3);
    let new = ActionChunk::new(scalars(&[9.0, 9.0, 1.0, 1.0, 1.0, 1.0]), 0)?;
    show("old", &old);
    show("naive switch", &naive_switch(&old, &new, old.k, cfg.d_max));
    show("smooth swap", &smooth_swap(&old, &new, &cfg)?);

    // A nearly empty buffer is padded with its last command before blending.
    let short = ExecutionBuffer::new(scalars(&[4.0]), 0);
    let fresh = ActionChunk::new(scalars(&[0.0; 5]), 0)?;
    show("padded blend", &smooth_swap(&short, &fresh, &cfg)?);

    // Everything in the new chunk is already stale: the buffer is kept.
    let stale = ExecutionBuffer::new(scalars(&[5.0, 5.0]), 7);
    let tiny = ActionChunk::new(scalars(&[1.0, 1.0]), 0)?;
    show("ignored update", &smooth_swap(&stale, &tiny, &cfg)?);
    Ok(())
}
