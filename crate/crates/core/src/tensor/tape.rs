use std::cell::RefCell;
use std::rc::Rc;

use super::{ops, Real, Tensor};
use crate::error::{Error, Result};

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    backward: Option<Backward<T>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. One tape per training step.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    /// Bessel-corrected variance, used for the running estimate.
    pub fn unbiased_var(&self) -> Vec<T> {
        if self.count < 2 {
            return self.var.clone();
        }
        let f = T::from_usize(self.count) / T::from_usize(self.count - 1);
        self.var.iter().map(|&v| v * f).collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<T>, backward: Option<Backward<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            backward,
        });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input whose gradient may be requested.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.zero_grad();
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn conv2d(&self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernels));
        let out = ops::conv2d(&xv, &kv, stride, padding)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let (dx, dk) = ops::conv2d_backward(&xv, &kv, stride, padding, g)?;
                Ok(vec![(x, dx), (kernels, dk)])
            })),
        ))
    }

    pub fn add_channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(&self.value(x), &self.value(bias))?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                Ok(vec![(x, g.clone()), (bias, ops::channel_sums(g)?)])
            })),
        ))
    }

    /// Batch norm normalized with the statistics of `x` itself.
    pub fn batchnorm_train(&self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bn = ops::batchnorm2d_train(&xv, &gv, &self.value(beta))?;
        let shape = xv.shape();
        let stats = BatchStats {
            mean: bn.mean,
            var: bn.var,
            count: shape[0] * shape[2] * shape[3],
        };
        let (normalized, sigma) = (bn.normalized, bn.sigma);
        let out = self.push(
            bn.output,
            Some(Box::new(move |g| {
                let (dx, dg, db) = ops::batchnorm2d_train_backward(&normalized, &sigma, &gv, g)?;
                Ok(vec![(x, dx), (gamma, dg), (beta, db)])
            })),
        );
        Ok((out, stats))
    }

    /// Batch norm with fixed statistics `mu` and `sigma`.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        mu: &Tensor<T>,
        sigma: &Tensor<T>,
        gamma: Var,
        beta: Var,
    ) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gamma));
        let out = ops::batchnorm2d(&xv, mu, sigma, &gv, &self.value(beta))?;
        let (mu, sigma) = (mu.clone(), sigma.clone());
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let c = mu.numel();
                let plane = xv.shape()[2] * xv.shape()[3];
                let mut dx = g.data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                for (idx, d) in dx.iter_mut().enumerate() {
                    let j = (idx / plane) % c;
                    let xhat = (xv.data()[idx] - mu.data()[j]) / sigma.data()[j];
                    dgamma[j] = dgamma[j] + *d * xhat;
                    *d = *d * gv.data()[j] / sigma.data()[j];
                }
                Ok(vec![
                    (x, Tensor::new_unchecked(xv.shape().to_vec(), dx)),
                    (gamma, Tensor::new_unchecked(vec![c], dgamma)),
                    (beta, ops::channel_sums(g)?),
                ])
            })),
        ))
    }

    pub fn scale(&self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor).check_finite("scale")?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| Ok(vec![(x, g.map(|v| v * factor))]))),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new_unchecked(av.shape().to_vec(), data).check_finite("add")?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| Ok(vec![(a, g.clone()), (b, g.clone())]))),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new_unchecked(av.shape().to_vec(), data).check_finite("mul")?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let ga = g.data().iter().zip(bv.data()).map(|(&d, &q)| d * q).collect();
                let gb = g.data().iter().zip(av.data()).map(|(&d, &p)| d * p).collect();
                Ok(vec![
                    (a, Tensor::new_unchecked(g.shape().to_vec(), ga)),
                    (b, Tensor::new_unchecked(g.shape().to_vec(), gb)),
                ])
            })),
        ))
    }

    /// `Σ_k weights[k] · terms[k]` for same-shaped terms.
    pub fn weighted_sum(&self, terms: &[Var], weights: &[T]) -> Result<Var> {
        if terms.is_empty() || terms.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "weighted_sum over {} terms with {} weights",
                terms.len(),
                weights.len()
            )));
        }
        let mut acc = self.scale(terms[0], weights[0])?;
        for (&t, &w) in terms.iter().zip(weights).skip(1) {
            let scaled = self.scale(t, w)?;
            acc = self.add(acc, scaled)?;
        }
        Ok(acc)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = ops::relu(&xv);
        Ok(self.push(
            out,
            Some(Box::new(move |g| Ok(vec![(x, ops::relu_backward(&xv, g))]))),
        ))
    }

    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let out = ops::global_avg_pool(&self.value(x))?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                Ok(vec![(x, ops::global_avg_pool_backward(&shape, g))])
            })),
        ))
    }

    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let out = ops::linear(&xv, &wv, &self.value(bias))?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let (dx, dw, db) = ops::linear_backward(&xv, &wv, g);
                Ok(vec![(x, dx), (weight, dw), (bias, db)])
            })),
        ))
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = ops::log_softmax(&self.value(x))?;
        let captured = out.clone();
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                Ok(vec![(x, ops::log_softmax_backward(&captured, g))])
            })),
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let total = xv.data().iter().copied().fold(T::zero(), |a, b| a + b);
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(total).check_finite("sum")?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| Ok(vec![(x, Tensor::full(&shape, g.item()))]))),
        ))
    }

    /// Mean soft-target cross-entropy of `logits` against fixed `targets`.
    pub fn soft_cross_entropy(&self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (loss, grad) = ops::soft_cross_entropy(&self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g| {
                let s = g.item();
                Ok(vec![(logits, grad.map(|v| v * s))])
            })),
        ))
    }

    /// Information-maximization loss of a batch of logits.
    pub fn im_loss(&self, logits: Var, diversity: T) -> Result<Var> {
        let (loss, grad) = ops::im_loss(&self.value(logits), diversity)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g| {
                let s = g.item();
                Ok(vec![(logits, grad.map(|v| v * s))])
            })),
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::new_unchecked(
            nodes[loss.0].value.shape().to_vec(),
            vec![T::one()],
        ));
        for id in (0..=loss.0).rev() {
            let Some(backward) = &nodes[id].backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (parent, pg) in backward(&g)? {
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar w.r.t. the leaves of a tape.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq).unwrap();
        assert_eq!(tape.value(y).item(), 5.25);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let y = tape.sum(b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
