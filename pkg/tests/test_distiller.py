import math

import numpy as np
import pytest
from scipy.special import entr

from ml_training.data_pipeline import MinibatchStream, synthetic_blobs
from ml_training.distiller import (AdamState, Distiller, StudentConfig, adam_step, distill_loss, distill_online,
                                   iters_per_epoch, kl_categorical, perturb_batch, student_lr)
from ml_training.errors import DistillationError, ValidationError
from ml_training.nn_core import Dense, NetworkSpec, ParamVector, ReLU, forward, softmax
from ml_training.sgld_sampler import ChainSample, SGLDChain, TeacherConfig
from tests.conftest import max_relative_error, numeric_gradient

TEACHER_SPEC = NetworkSpec((Dense(2, 8), ReLU(), Dense(8, 3)), (2,))
STUDENT_SPEC = NetworkSpec((Dense(2, 6), ReLU(), Dense(6, 3)), (2,))


def _blobs(classes=3, n_per_class=50, seed=0):
    return synthetic_blobs(classes, 2, n_per_class, 3.0, seed)


def _teacher_samples(count, seed=0):
    dataset = _blobs()
    cfg = TeacherConfig(eta=1e-3, lam=1.0, n_total=len(dataset), batch_size=50, burn_in=1, thinning=1,
                        total_iters=count, seed=seed)
    return list(SGLDChain.for_dataset(TEACHER_SPEC, cfg, dataset)), dataset


# ---------------------------------------------------------------- divergences

def test_kl_examples():
    assert kl_categorical([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.5108, abs=1e-4)
    assert kl_categorical([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.3681, abs=1e-4)
    assert kl_categorical([0.3, 0.7], [0.3, 0.7]) == 0.0


def test_kl_handles_zero_probabilities():
    assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    assert math.isfinite(kl_categorical([0.5, 0.5], [1.0, 0.0]))


def test_forward_kl_loss_and_gradient_example():
    loss, grad = distill_loss(np.array([[0.5, 0.5]]), np.array([[0.75, 0.25]]))
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert loss == pytest.approx(expected)
    np.testing.assert_allclose(grad, [[-0.25, 0.25]])


def test_forward_kl_is_cross_entropy_minus_teacher_entropy():
    rng = np.random.default_rng(0)
    student = softmax(rng.standard_normal((20, 10)))
    teacher = softmax(rng.standard_normal((20, 10)))
    loss, _ = distill_loss(student, teacher)
    cross_entropy = -(teacher * np.log(student)).sum()
    assert loss == pytest.approx(cross_entropy - entr(teacher).sum(), rel=1e-10)


def test_identical_distributions_have_zero_loss_and_gradient():
    probs = softmax(np.random.default_rng(1).standard_normal((5, 4)))
    for mode in ("forward_kl", "reverse_kl"):
        loss, grad = distill_loss(probs, probs, mode)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)


@pytest.mark.parametrize("mode", ["forward_kl", "reverse_kl"])
def test_divergence_gradient_wrt_logits(mode):
    rng = np.random.default_rng(7)
    logits = rng.standard_normal(12)
    teacher = softmax(rng.standard_normal((3, 4)))

    def loss():
        return distill_loss(softmax(logits.reshape(3, 4)), teacher, mode)[0]

    _, analytic = distill_loss(softmax(logits.reshape(3, 4)), teacher, mode)
    numeric = numeric_gradient(loss, logits, h=1e-6)
    assert max_relative_error(analytic.ravel(), numeric, floor=1e-4) < 1e-4


def test_distill_loss_rejects_bad_input():
    with pytest.raises(ValidationError):
        distill_loss(np.full((2, 3), 1 / 3), np.full((2, 4), 0.25))
    with pytest.raises(ValidationError):
        distill_loss(np.full((1, 2), 0.5), np.full((1, 2), 0.5), "js")


# ---------------------------------------------------------------- optimizer and schedule

def _vector(values):
    spec = NetworkSpec((Dense(len(values), 1, bias=False),), (len(values),))
    return ParamVector(np.asarray(values, dtype=np.float64), ParamVector.zeros(spec).layout)


def test_adam_first_step_moves_by_learning_rate():
    cfg = StudentConfig()
    omega = _vector([0.0, 0.0])
    updated, state = adam_step(omega, np.array([1.0, -2.0]), AdamState.zeros_like(omega), 0.1, cfg)
    np.testing.assert_allclose(updated.values, [-0.1, 0.1], rtol=1e-6)
    assert state.step_count == 1
    np.testing.assert_array_equal(omega.values, [0.0, 0.0])


def test_adam_zero_gradient_keeps_parameters():
    cfg = StudentConfig()
    omega = _vector([0.3, -1.2, 4.0])
    state = AdamState.zeros_like(omega)
    for _ in range(3):
        omega, state = adam_step(omega, np.zeros(3), state, 1e-3, cfg)
    np.testing.assert_array_equal(omega.values, [0.3, -1.2, 4.0])


def test_adam_state_round_trip():
    cfg = StudentConfig()
    omega = _vector([1.0, 2.0])
    _, state = adam_step(omega, np.array([0.5, -0.5]), AdamState.zeros_like(omega), 1e-2, cfg)
    restored = AdamState.from_state(state.state_dict())
    assert restored.step_count == 1
    np.testing.assert_array_equal(restored.first_moment, state.first_moment)
    np.testing.assert_array_equal(restored.second_moment, state.second_moment)


def test_learning_rate_halves_per_period():
    cfg = StudentConfig(rho0=1e-3, halving_period_epochs=100)
    assert student_lr(0, 10, cfg) == 1e-3
    assert student_lr(999, 10, cfg) == 1e-3
    assert student_lr(1000, 10, cfg) == 5e-4
    assert student_lr(2000, 10, cfg) == 2.5e-4
    with pytest.raises(ValidationError):
        student_lr(0, 0, cfg)


def test_iters_per_epoch():
    assert iters_per_epoch(60000, 100) == 600
    assert iters_per_epoch(50, 100) == 1


def test_student_config_validation():
    with pytest.raises(ValidationError):
        StudentConfig(rho0=0.0)
    with pytest.raises(ValidationError):
        StudentConfig(dropout_rate=1.0)
    with pytest.raises(ValidationError):
        StudentConfig(divergence="js")
    with pytest.raises(ValidationError):
        StudentConfig(input_source="labels")


# ---------------------------------------------------------------- perturbation

def test_zero_sigma_copies_batch():
    batch = np.arange(6.0).reshape(2, 3)
    perturbed = perturb_batch(batch, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(perturbed, batch)
    assert perturbed is not batch


def test_perturbation_noise_level():
    batch = np.zeros((1000, 100))
    noise = perturb_batch(batch, 1e-3, np.random.default_rng(0))
    assert abs(noise.std() - 1e-3) < 2e-5
    assert abs(noise.mean()) < 1e-5
    with pytest.raises(ValidationError):
        perturb_batch(batch, -1.0, np.random.default_rng(0))


def test_masked_pixels_are_perturbed_too():
    image = np.zeros((1, 1, 28, 28))
    perturbed = perturb_batch(image, 1e-3, np.random.default_rng(3))
    assert np.count_nonzero(perturbed) == 28 * 28


# ---------------------------------------------------------------- distiller

def test_empty_chain_leaves_student_unchanged():
    omega = ParamVector.initialize(STUDENT_SPEC, np.random.default_rng(0))
    pool = _blobs().unlabeled()
    result = distill_online(iter(()), TEACHER_SPEC, STUDENT_SPEC, omega, pool, StudentConfig(), batch_size=50)
    assert result.values.tobytes() == omega.values.tobytes()


def test_first_step_reduces_batch_divergence():
    cfg = StudentConfig(rho0=1e-3, dropout_rate=0.0, perturb_sigma=0.0)
    inputs = _blobs().inputs[:50]
    decreased = 0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        theta = ParamVector.initialize(TEACHER_SPEC, rng)
        omega = ParamVector.initialize(STUDENT_SPEC, rng)
        teacher_probs = softmax(forward(TEACHER_SPEC, theta, inputs))
        before, _ = distill_loss(softmax(forward(STUDENT_SPEC, omega, inputs)), teacher_probs)

        distiller = Distiller(TEACHER_SPEC, STUDENT_SPEC, cfg, None, 50, omega=omega)
        assert distiller.step(theta, inputs) == pytest.approx(before)
        after, _ = distill_loss(softmax(forward(STUDENT_SPEC, distiller.omega, inputs)), teacher_probs)
        decreased += after < before
    assert decreased >= 45


def test_distiller_seeds_are_reproducible():
    samples, dataset = _teacher_samples(15)
    cfg = StudentConfig(dropout_rate=0.2, seed=4)
    runs = [distill_online(iter(samples), TEACHER_SPEC, STUDENT_SPEC, None, dataset.unlabeled(), cfg, 50)
            for _ in range(2)]
    assert runs[0].values.tobytes() == runs[1].values.tobytes()


def test_distiller_resumes_from_state():
    samples, dataset = _teacher_samples(20)
    cfg = StudentConfig(dropout_rate=0.3, seed=9, input_source="pool")
    pool = dataset.unlabeled()

    straight = Distiller(TEACHER_SPEC, STUDENT_SPEC, cfg, pool, 50)
    for sample in samples:
        straight.consume(sample)

    first = Distiller(TEACHER_SPEC, STUDENT_SPEC, cfg, pool, 50)
    for sample in samples[:8]:
        first.consume(sample)
    resumed = Distiller(TEACHER_SPEC, STUDENT_SPEC, cfg, pool, 50)
    resumed.load_state_dict(first.state_dict())
    for sample in samples[8:]:
        resumed.consume(sample)

    assert resumed.iteration == straight.iteration == 20
    assert resumed.last_loss == straight.last_loss
    assert resumed.omega.values.tobytes() == straight.omega.values.tobytes()


def test_pool_input_source_needs_pool():
    with pytest.raises(ValidationError):
        Distiller(TEACHER_SPEC, STUDENT_SPEC, StudentConfig(input_source="pool"), None, 50)


def test_non_finite_teacher_aborts_step():
    theta = ParamVector.initialize(TEACHER_SPEC, np.random.default_rng(0))
    theta.values[:] = np.nan
    distiller = Distiller(TEACHER_SPEC, STUDENT_SPEC, StudentConfig(), None, 10)
    with pytest.raises(DistillationError) as excinfo:
        distiller.step(theta, np.zeros((10, 2)))
    assert excinfo.value.iteration == 1


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_student_matches_fixed_linear_teacher(seed):
    teacher_spec = NetworkSpec((Dense(2, 2),), (2,))
    theta = ParamVector.zeros(teacher_spec)
    theta.view(0, "weight")[...] = [[2.0, -2.0], [0.0, 0.0]]
    student_spec = NetworkSpec((Dense(2, 2),), (2,))

    dataset = _blobs(classes=2, n_per_class=100, seed=seed)
    stream = MinibatchStream.from_dataset(dataset, 50, np.random.default_rng(seed))
    samples = (ChainSample(t, theta, False, stream.next_batch()) for t in range(1, 5001))

    axis = np.linspace(-3.0, 3.0, 13)
    grid = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
    teacher_probs = softmax(forward(teacher_spec, theta, grid))

    def grid_kl(omega):
        return distill_loss(softmax(forward(student_spec, omega, grid)), teacher_probs)[0] / grid.shape[0]

    cfg = StudentConfig(rho0=1e-2, dropout_rate=0.0, halving_period_epochs=1000, seed=seed)
    start = ParamVector.initialize(student_spec, np.random.default_rng(100 + seed))
    final = distill_online(samples, teacher_spec, student_spec, start, dataset.unlabeled(), cfg, batch_size=50)
    assert grid_kl(final) <= 0.5 * grid_kl(start)
