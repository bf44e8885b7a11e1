use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.record("relu", value, &[x], |ctx| {
            let g = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(Tensor::from_parts(ctx.grad.shape(), g))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid_scalar);
        self.record("sigmoid", value, &[x], |ctx| {
            let g = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.output.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            vec![Some(Tensor::from_parts(ctx.grad.shape(), g))]
        })
    }

    /// Mean absolute difference; subgradient 0 where the operands tie.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(crate::Error::ShapeMismatch { op: "l1_loss", lhs: sp, rhs: st });
        }
        let inv = T::one() / T::from_usize(sp.numel()).unwrap();
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        self.record("l1_loss", Tensor::scalar(total * inv), &[pred, target], move |ctx| {
            let g = ctx.grad.item() * inv;
            let signs: Vec<T> = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.inputs[1].data())
                .map(|(&a, &b)| {
                    let d = a - b;
                    if d > T::zero() {
                        g
                    } else if d < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let neg = ctx.needs[1].then(|| Tensor::from_parts(sp, signs.iter().map(|&v| -v).collect()));
            vec![Some(Tensor::from_parts(sp, signs)), neg]
        })
    }
}
