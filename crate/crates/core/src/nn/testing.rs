//! Finite-difference checks for layer backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    assert!(
        (analytic - numeric).abs() / scale < 1e-5,
        "{what}: analytic {analytic} vs finite difference {numeric}"
    );
}

/// Checks input and trainable-parameter gradients of a layer against central
/// differences of the scalar objective `<forward(x), r>` for a fixed random `r`.
pub(crate) fn check_layer_gradients<T>(
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    forward: impl Fn(&ParamStore<f64>, &Tensor<f64>) -> (Tensor<f64>, T),
    backward: impl Fn(&ParamStore<f64>, &T, &Tensor<f64>, &mut Gradients<f64>) -> Tensor<f64>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (y, trace) = forward(store, x);
    let r = random_tensor(y.shape(), &mut rng);
    let objective = |s: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let (y, _) = forward(s, x);
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut grads = Gradients::for_store(store);
    let dx = backward(store, &trace, &r, &mut grads);
    assert_eq!(dx.shape(), x.shape());

    let h = 1e-6;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (objective(store, &plus) - objective(store, &minus)) / (2.0 * h);
        assert_close(dx.data()[i], fd, &format!("input[{i}]"));
    }

    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let n = store.get(id).len();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = objective(store, x);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = objective(store, x);
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            assert_close(analytic, fd, &format!("{}[{i}]", store.name(id)));
        }
    }
}
