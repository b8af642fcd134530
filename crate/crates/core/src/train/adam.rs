use super::TrainConfig;
use crate::field::{ParamGroup, ParamLayout};

/// Per-parameter Adam with bias correction and a learning rate per group.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    groups: Vec<(std::ops::Range<usize>, f64)>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
}

impl Adam {
    pub fn new(layout: &ParamLayout, cfg: &TrainConfig) -> Self {
        let groups = layout
            .groups()
            .map(|(r, g)| {
                let lr = match g {
                    ParamGroup::Grid => cfg.lr_grid,
                    ParamGroup::Head => cfg.lr_head,
                    ParamGroup::Embedding => cfg.lr_embedding,
                };
                (r, lr)
            })
            .collect();
        Self {
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            groups,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
        }
    }

    /// One update with every group's learning rate multiplied by `scale`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (range, lr) in &self.groups {
            let lr = lr * scale;
            for i in range.clone() {
                let g = grad[i];
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                if g == 0.0 && *m == 0.0 {
                    continue;
                }
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                params[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, RadianceField};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let field = RadianceField::new(
            FieldConfig {
                grid_resolutions: vec![1],
                ..Default::default()
            },
            &[],
        )
        .unwrap();
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(field.layout(), &cfg);
        let mut params = vec![0.0; field.layout().total];
        let mut grad = vec![0.0; params.len()];
        grad[0] = 3.0;
        let head = field.layout().density[0].weight;
        grad[head] = -0.5;
        adam.step(&mut params, &grad, 1.0);
        assert!((params[0] + cfg.lr_grid).abs() < 1e-9);
        assert!((params[head] - cfg.lr_head).abs() < 1e-9);
        assert_eq!(params[1], 0.0);
    }
}
