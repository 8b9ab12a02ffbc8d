use crate::error::{Error, Result};
use crate::layers::{GradientSet, Network};
use crate::tensor::Tensor;

/// Stochastic gradient descent with optional heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`. With `μ = 0` this is plain SGD.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Vec<Vec<Tensor>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &GradientSet) -> Result<()> {
        if !grads.is_congruent(net) {
            return Err(Error::dim("gradient set does not match the network's parameters"));
        }
        let velocity = self.velocity.get_or_insert_with(|| {
            grads
                .params
                .iter()
                .map(|gs| gs.iter().map(|g| Tensor::zeros(g.shape())).collect())
                .collect()
        });
        for ((layer, gs), vs) in net.layers_mut().iter_mut().zip(&grads.params).zip(velocity.iter_mut()) {
            for ((p, g), v) in layer.params_mut().iter_mut().zip(gs).zip(vs.iter_mut()) {
                for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{InitScheme, LayerSpec};

    fn net() -> Network {
        let mut n = Network::new(&[1], &[LayerSpec::dense(1, 1)]).unwrap();
        n.init_parameters(InitScheme::Uniform { low: 1.0, high: 1.0 }, 0);
        n
    }

    fn grads(g: f64) -> GradientSet {
        GradientSet {
            params: vec![vec![Tensor::full(&[1, 1], g), Tensor::full(&[1], 0.0)]],
            input_deltas: vec![Tensor::zeros(&[1, 1])],
        }
    }

    fn weight(n: &Network) -> f64 {
        n.layers()[0].params()[0].data()[0]
    }

    #[test]
    fn plain_step() {
        let mut n = net();
        Sgd::new(0.1, 0.0).step(&mut n, &grads(2.0)).unwrap();
        assert!((weight(&n) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut n = net();
        Sgd::new(0.0, 0.9).step(&mut n, &grads(5.0)).unwrap();
        assert_eq!(weight(&n), 1.0);
    }

    #[test]
    fn momentum_unrolled() {
        let mut n = net();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut n, &grads(2.0)).unwrap();
        opt.step(&mut n, &grads(1.0)).unwrap();
        // v1 = 2, θ1 = 1 − 0.2; v2 = 0.9·2 + 1 = 2.8, θ2 = θ1 − 0.28
        assert!((weight(&n) - (1.0 - 0.2 - 0.28)).abs() < 1e-15);
    }

    #[test]
    fn rejects_incongruent_gradients() {
        let mut n = net();
        let bad = GradientSet {
            params: vec![vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[1])]],
            input_deltas: vec![],
        };
        assert!(matches!(
            Sgd::new(0.1, 0.0).step(&mut n, &bad),
            Err(Error::Dimension(_))
        ));
    }
}
