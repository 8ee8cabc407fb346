//! SGD with momentum and weight decay (decay folded into the gradient, then
//! the velocity update, matching the common deep-learning convention).

use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global L2 clip applied to the raw gradient before the momentum
    /// update; rescues steps from occasional huge soft-label gradients.
    pub clip_norm: Option<f32>,
    velocity: Vec<ArrayD<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip.map(|c| c as f32);
        self
    }

    /// v <- m*v + (g + wd*w); w <- w - lr*v, with g optionally rescaled to
    /// the configured global norm first.
    pub fn step(&mut self, params: &mut [&mut ArrayD<f32>], grads: &[ArrayD<f32>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        let scale = match self.clip_norm {
            Some(clip) => {
                let mut sq = 0.0f64;
                for g in grads {
                    for &v in g.as_slice().expect("contiguous") {
                        sq += (v as f64) * (v as f64);
                    }
                }
                let norm = sq.sqrt() as f32;
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for ((w, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let ws = w.as_slice_mut().expect("contiguous");
            let gs = g.as_slice().expect("contiguous");
            let vs = v.as_slice_mut().expect("contiguous");
            for i in 0..ws.len() {
                vs[i] = self.momentum * vs[i] + scale * gs[i] + self.weight_decay * ws[i];
                ws[i] -= self.lr * vs[i];
            }
        }
    }

    pub fn velocity(&self) -> &[ArrayD<f32>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<ArrayD<f32>>) {
        self.velocity = v;
    }
}
