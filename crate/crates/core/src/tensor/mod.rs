//! Dense `f64` matrices with reverse-mode differentiation, the layers the
//! policies are built from, checkpoints, and Adam.

pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use nn::{GcnLayer, GruCell, Linear, Mlp, MultiHeadAttention};
pub use optim::{clip_grad_norm, grad_norm, Adam, AdamConfig};
pub use params::{ParamStore, CHECKPOINT_VERSION};
pub use tape::{softmax_rows, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("tape was already differentiated")]
    AlreadyDifferentiated,
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("parameter {0} already exists")]
    DuplicateParam(String),
    #[error("checkpoint version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint tensor {path} does not fit shape {shape:?}")]
    CheckpointShape { path: String, shape: (usize, usize) },
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose stencil straddles a kink (relu, clamp, min)
    /// and so have no two-sided derivative.
    pub skipped: usize,
}

/// Compares `backward` against central differences with step `h` for every
/// scalar in `store`. `f` must build a `1 x 1` loss from the store.
pub fn gradcheck<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let analytic = tape.backward(loss)?;

    let eval = |ps: &ParamStore| -> Result<(f64, Vec<bool>), TensorError> {
        let mut t = Tape::new();
        let l = f(&mut t, ps)?;
        Ok((t.scalar(l), t.kink_signature()))
    };

    let mut probe = store.clone();
    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for path in &paths {
        let n = store.get(path).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = store.get(path).expect("path from store").as_slice().expect("standard layout")[i];
            set_flat(&mut probe, path, i, orig + h);
            let (up, sig_up) = eval(&probe)?;
            set_flat(&mut probe, path, i, orig - h);
            let (down, sig_down) = eval(&probe)?;
            set_flat(&mut probe, path, i, orig);
            if sig_up != sig_down {
                out.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(path).map_or(0.0, |g| g.as_slice().expect("standard layout")[i]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    Ok(out)
}

fn set_flat(store: &mut ParamStore, path: &str, i: usize, value: f64) {
    store.get_mut(path).expect("path from store").as_slice_mut().expect("standard layout")[i] = value;
}
