use crate::params::ParamStore;

/// `lr₀ · ½ · (1 + cos(π·t/T))`; `t` is clamped to `[0, T]`.
pub fn cosine_lr(step: usize, horizon: usize, base: f64) -> f64 {
    if horizon == 0 {
        return base;
    }
    let t = step.min(horizon) as f64 / horizon as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub skipped: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            skipped: 0,
        }
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient count as zero-gradient. A non-finite gradient anywhere skips
/// the whole step and returns `false`.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamW, lr: f64) -> bool {
    let finite = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .all(|g| g.iter().all(|x| x.is_finite()));
    if !finite {
        state.skipped += 1;
        log::warn!("non-finite gradient; optimizer step {} skipped", state.step + 1);
        return false;
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, t) in params.tensors_mut().enumerate() {
        let grad = t.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *p -= lr * state.weight_decay * *p;
            *p -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    true
}
