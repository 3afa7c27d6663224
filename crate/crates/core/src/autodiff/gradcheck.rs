use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; all of them if smaller.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: 16,
            seed: 0,
        }
    }
}

/// Largest relative disagreement between the analytic gradient of `f` and
/// central differences over sampled trainable coordinates:
/// `|a - cd| / max(|a|, |cd|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: GradCheckOptions) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss)?.accumulate(store);
    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(s, &mut t)?;
        Ok(t.value(l).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for k in 0..store.len() {
        let id = super::ParamId(k);
        let (trainable, n) = {
            let p = store.get(id);
            (p.trainable, p.value.numel())
        };
        if !trainable || n == 0 {
            continue;
        }
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords_per_param).into_vec()
        };
        for i in coords {
            let orig = store.get(id).value.data[i];
            store.get_mut(id).value.data[i] = orig + opts.eps;
            let up = eval(store)?;
            store.get_mut(id).value.data[i] = orig - opts.eps;
            let down = eval(store)?;
            store.get_mut(id).value.data[i] = orig;
            let cd = (up - down) / (2.0 * opts.eps);
            let a = store.get(id).grad[i];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
