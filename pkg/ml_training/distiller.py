# [file name]: distiller.py
"""
Online distillation of the teacher's posterior predictive into one student.

Per teacher iteration: perturb the minibatch inputs (S'), take the teacher's
soft targets under theta_{t+1}, and make a single Adam step on the student.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr

from ml_training.data_pipeline import MinibatchStream
from ml_training.errors import DistillationError, ValidationError
from ml_training.nn_core import EVAL, ForwardMode, Network, ParamVector, softmax
from ml_training.seeding import restore_rng, rng_state, substream

PROB_FLOOR = 1e-12
DIVERGENCES = ("forward_kl", "reverse_kl")
INPUT_SOURCES = ("teacher_batch", "pool")


@dataclass(frozen=True)
class StudentConfig:
    rho0: float = 1e-3
    dropout_rate: float = 0.5
    perturb_sigma: float = 1e-3
    # forward_kl = KL(teacher || student), reverse_kl = KL(student || teacher)
    divergence: str = "forward_kl"
    halving_period_epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    input_source: str = "teacher_batch"

    def __post_init__(self):
        if self.rho0 <= 0:
            raise ValidationError(f"student learning rate must be positive, got {self.rho0}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.perturb_sigma < 0:
            raise ValidationError(f"perturbation sigma must be non-negative, got {self.perturb_sigma}")
        if self.divergence not in DIVERGENCES:
            raise ValidationError(f"divergence must be one of {DIVERGENCES}, got {self.divergence}")
        if self.halving_period_epochs < 1:
            raise ValidationError("halving period must be at least one epoch")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValidationError("Adam betas must lie in (0, 1)")
        if self.input_source not in INPUT_SOURCES:
            raise ValidationError(f"input_source must be one of {INPUT_SOURCES}")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), 0)

    def state_dict(self):
        return {"first_moment": self.first_moment.copy(), "second_moment": self.second_moment.copy(),
                "step_count": self.step_count}

    @classmethod
    def from_state(cls, state):
        return cls(np.asarray(state["first_moment"]).copy(), np.asarray(state["second_moment"]).copy(),
                   int(state["step_count"]))


def perturb_batch(batch_inputs, sigma, rng):
    """S' inputs: x + N(0, sigma^2) on every pixel, masked ones included"""
    if sigma < 0:
        raise ValidationError(f"sigma must be non-negative, got {sigma}")
    batch_inputs = np.asarray(batch_inputs)
    if sigma == 0:
        return batch_inputs.copy()
    noise = rng.normal(0.0, sigma, size=batch_inputs.shape)
    return (batch_inputs + noise).astype(batch_inputs.dtype, copy=False)


def kl_categorical(p, q):
    """KL(p || q) in nats; q floored at 1e-12, 0 ln 0 = 0"""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    return max(0.0, float(rel_entr(p, q).sum()))


def distill_loss(student_probs, teacher_probs, mode="forward_kl"):
    """
    Summed per-row divergence and its gradient w.r.t. the student logits.

    forward_kl: sum KL(teacher || student), gradient student - teacher.
    reverse_kl: sum KL(student || teacher), gradient s * (ln s - ln t - KL_row).
    """
    student_probs = np.asarray(student_probs)
    teacher_probs = np.asarray(teacher_probs)
    if student_probs.shape != teacher_probs.shape:
        raise ValidationError(f"student {student_probs.shape} and teacher {teacher_probs.shape} shapes differ")

    if mode == "forward_kl":
        per_row = rel_entr(teacher_probs, np.maximum(student_probs, PROB_FLOOR)).sum(axis=-1)
        grad = student_probs - teacher_probs
    elif mode == "reverse_kl":
        log_ratio = np.log(np.maximum(student_probs, PROB_FLOOR)) - np.log(np.maximum(teacher_probs, PROB_FLOOR))
        per_row = (student_probs * log_ratio).sum(axis=-1)
        grad = student_probs * (log_ratio - per_row[:, None])
    else:
        raise ValidationError(f"unknown divergence: {mode}")
    return float(np.maximum(per_row, 0.0).sum()), grad


def adam_step(omega, grad, state, lr, cfg):
    """Bias-corrected Adam; returns new (omega, state) and leaves the inputs untouched"""
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad)
    if g.shape != omega.values.shape:
        raise ValidationError(f"gradient shape {g.shape} does not match parameters {omega.values.shape}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step_count + 1

    first = b1 * state.first_moment + (1.0 - b1) * g
    second = b2 * state.second_moment + (1.0 - b2) * (g * g)
    first_hat = first / (1.0 - b1 ** t)
    second_hat = second / (1.0 - b2 ** t)

    values = omega.values - lr * first_hat / (np.sqrt(second_hat) + cfg.adam_eps)
    return omega.with_values(values.astype(omega.dtype, copy=False)), AdamState(first, second, t)


def iters_per_epoch(pool_size, batch_size):
    return max(1, pool_size // batch_size)


def student_lr(iteration, iters_per_epoch, cfg):
    """rho0 halved every `halving_period_epochs` epochs"""
    if iters_per_epoch < 1:
        raise ValidationError(f"iters_per_epoch must be >= 1, got {iters_per_epoch}")
    epoch = iteration // iters_per_epoch
    return cfg.rho0 * 2.0 ** (-(epoch // cfg.halving_period_epochs))


class Distiller:
    """Student state (omega, Adam moments, RNG substreams) advanced one teacher sample at a time"""

    def __init__(self, teacher_spec, student_spec, cfg, pool, batch_size, omega=None, dtype=np.float64):
        self.cfg = cfg
        self.teacher_network = Network(teacher_spec)
        self.student_network = Network(student_spec)
        if omega is None:
            omega = ParamVector.initialize(student_spec, substream(cfg.seed, "student_init"), dtype=dtype)
        self.omega = omega
        self.adam = AdamState.zeros_like(omega)
        self.perturb_rng = substream(cfg.seed, "perturb")
        self.dropout_rng = substream(cfg.seed, "dropout")
        self.pool_batches = None
        if cfg.input_source == "pool":
            if pool is None:
                raise ValidationError("input_source=pool needs an unlabeled pool")
            self.pool_batches = MinibatchStream(pool.inputs, None, batch_size, substream(cfg.seed, "pool_batches"))
        pool_size = len(pool) if pool is not None else batch_size
        self.iters_per_epoch = iters_per_epoch(pool_size, batch_size)
        self.iteration = 0
        self.last_loss = None

    def step(self, theta, inputs):
        if self.pool_batches is not None:
            inputs = self.pool_batches.next_batch().inputs
        x = perturb_batch(inputs, self.cfg.perturb_sigma, self.perturb_rng).astype(self.omega.dtype, copy=False)

        teacher_probs = softmax(self.teacher_network.forward(theta, x, EVAL))
        mode = ForwardMode.training(int(self.dropout_rng.integers(0, 2 ** 63 - 1)))
        logits = self.student_network.forward(self.omega, x, mode)
        loss, grad_logits = distill_loss(softmax(logits), teacher_probs, self.cfg.divergence)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad_logits)):
            raise DistillationError(self.iteration + 1)

        grad = self.student_network.backward(self.omega, x, grad_logits)
        lr = student_lr(self.iteration, self.iters_per_epoch, self.cfg)
        self.omega, self.adam = adam_step(self.omega, grad, self.adam, lr, self.cfg)
        self.iteration += 1
        self.last_loss = loss
        return loss

    def consume(self, sample):
        """Advance on a ChainSample; only the batch inputs are read"""
        return self.step(sample.theta, sample.batch.inputs)

    def state_dict(self):
        tag, data = self.omega.to_bytes()
        return {
            "iteration": self.iteration,
            "last_loss": self.last_loss,
            "omega_dtype": tag,
            "omega": data,
            "adam": self.adam.state_dict(),
            "perturb_rng": rng_state(self.perturb_rng),
            "dropout_rng": rng_state(self.dropout_rng),
            "pool_batches": None if self.pool_batches is None else self.pool_batches.state_dict(),
        }

    def load_state_dict(self, state):
        self.iteration = int(state["iteration"])
        self.last_loss = state.get("last_loss")
        self.omega = ParamVector.from_bytes(state["omega_dtype"], state["omega"], self.omega.layout)
        self.adam = AdamState.from_state(state["adam"])
        self.perturb_rng = restore_rng(state["perturb_rng"])
        self.dropout_rng = restore_rng(state["dropout_rng"])
        if self.pool_batches is not None and state.get("pool_batches") is not None:
            self.pool_batches.load_state_dict(state["pool_batches"])


def distill_online(teacher_chain, teacher_spec, student_spec, student_params, unlabeled_pool, cfg, batch_size=100):
    """
    One student Adam step per teacher sample; returns the final omega.

    teacher_chain yields ChainSample objects (theta_{t+1} and the minibatch S).
    """
    omega = None if student_params is None else student_params.copy()
    distiller = Distiller(teacher_spec, student_spec, cfg, unlabeled_pool, batch_size, omega=omega)
    for sample in teacher_chain:
        distiller.consume(sample)
    return distiller.omega
