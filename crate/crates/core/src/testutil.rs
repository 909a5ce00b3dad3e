use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck;
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};

pub(crate) struct Lcg(ChaCha8Rng);

impl Lcg {
    pub(crate) fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub(crate) fn matrix(&mut self, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| (2.0 * self.0.random::<f64>() - 1.0) * scale)
    }
}

pub(crate) fn fd_check(
    store: &ParamStore,
    id: ParamId,
    h: f64,
    f: impl FnMut(&ParamStore) -> f64,
) -> Matrix {
    gradcheck::numeric_gradient(store, id, h, f)
}

pub(crate) fn assert_grad_close(name: &str, analytic: &Matrix, numeric: &Matrix, tol: f64) {
    let c = gradcheck::compare(name, analytic, numeric);
    assert!(
        c.max_relative_error < tol,
        "{name}: rel err {} (analytic {}, numeric {})",
        c.max_relative_error,
        c.analytic,
        c.numeric
    );
}
