# [file name]: sgld_sampler.py
"""
Stochastic Gradient Langevin Dynamics over flat parameter vectors.

    theta_{t+1} = theta_t + (eta/2) * (grad log p(theta | lambda)
                                       + (N/M) * sum_i grad log p(y_i | x_i, theta_t)) + z_t
    z_t ~ N(0, eta * I)

The chain keeps burn-in / thinning bookkeeping; retained samples feed a
streaming Monte Carlo average of the posterior predictive distribution.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ml_training.data_pipeline import LabeledBatch, MinibatchStream
from ml_training.errors import SamplerError, ValidationError
from ml_training.metrics import predictive_entropies
from ml_training.nn_core import EVAL, LIKELIHOODS, Network, NetworkSpec, ParamVector, softmax
from ml_training.seeding import restore_rng, rng_state, substream

NOISE_SCALES = ("variance", "std")


@dataclass(frozen=True)
class TeacherConfig:
    eta: float = 4e-6
    lam: float = 10.0
    n_total: int = 60000
    batch_size: int = 100
    burn_in: int = 1000
    thinning: int = 100
    total_iters: int = 1_000_000
    seed: int = 0
    likelihood: str = "categorical"
    # how to read N(0, eta I): covariance eta (default) or standard deviation eta
    noise_scale: str = "variance"

    def __post_init__(self):
        if self.eta < 0:
            raise ValidationError(f"teacher learning rate must be non-negative, got {self.eta}")
        if self.lam < 0:
            raise ValidationError(f"prior precision must be non-negative, got {self.lam}")
        if not 0 < self.batch_size <= self.n_total:
            raise ValidationError(f"need 0 < M <= N, got M={self.batch_size}, N={self.n_total}")
        if not 0 <= self.burn_in < self.total_iters:
            raise ValidationError(f"need 0 <= B < T, got B={self.burn_in}, T={self.total_iters}")
        if self.thinning < 1:
            raise ValidationError(f"thinning interval must be >= 1, got {self.thinning}")
        if self.likelihood not in LIKELIHOODS:
            raise ValidationError(f"unknown likelihood: {self.likelihood}")
        if self.noise_scale not in NOISE_SCALES:
            raise ValidationError(f"noise_scale must be one of {NOISE_SCALES}")

    def is_retained(self, t):
        return t > self.burn_in and (t - self.burn_in) % self.thinning == 0

    def retained_iterations(self):
        return range(self.burn_in + self.thinning, self.total_iters + 1, self.thinning)


@dataclass(frozen=True)
class ChainSample:
    iteration: int
    theta: ParamVector
    retained: bool
    batch: LabeledBatch


def log_prior_grad(theta, lam):
    """Gradient of the zero-mean spherical Gaussian log prior: -lambda * theta"""
    if lam < 0:
        raise ValidationError(f"prior precision must be non-negative, got {lam}")
    return theta.with_values(-lam * theta.values)


def _as_network(network_or_spec):
    if isinstance(network_or_spec, NetworkSpec):
        return Network(network_or_spec)
    return network_or_spec


def log_likelihood_grad(network, theta, batch, likelihood="categorical"):
    """Sum over the batch of grad log p(y_i | x_i, theta)"""
    outputs = network.forward(theta, batch.inputs, EVAL)
    _, grad_outputs = LIKELIHOODS[likelihood](outputs, batch.labels)
    return -network.backward(theta, batch.inputs, grad_outputs).values


def sgld_step(theta_t, spec, minibatch, cfg, rng, iteration=None):
    """
    One Langevin update.

    rng=None disables the injected noise. `spec` may be a NetworkSpec or a
    Network (reused to avoid re-allocation inside a chain).
    """
    if len(minibatch) != cfg.batch_size:
        raise ValidationError(f"minibatch holds {len(minibatch)} cases, config says M={cfg.batch_size}")
    network = _as_network(spec)

    likelihood_grad = log_likelihood_grad(network, theta_t, minibatch, cfg.likelihood)
    drift = log_prior_grad(theta_t, cfg.lam).values + (cfg.n_total / cfg.batch_size) * likelihood_grad
    if not np.all(np.isfinite(drift)):
        raise SamplerError(iteration if iteration is not None else -1)

    values = theta_t.values + (0.5 * cfg.eta) * drift
    if rng is not None and cfg.eta > 0:
        scale = np.sqrt(cfg.eta) if cfg.noise_scale == "variance" else cfg.eta
        values = values + scale * rng.standard_normal(values.shape[0]).astype(values.dtype, copy=False)
    return theta_t.with_values(values.astype(theta_t.dtype, copy=False))


class SGLDChain:
    """
    Sequential SGLD driver with init / minibatch / langevin substreams.

    Iterating yields a ChainSample per iteration until total_iters.
    """

    def __init__(self, spec, cfg, batches, init=None, dtype=np.float64):
        self.spec = spec
        self.cfg = cfg
        self.network = Network(spec)
        self.batches = batches
        if init is None:
            init = ParamVector.initialize(spec, substream(cfg.seed, "init"), dtype=dtype)
        self.theta = init
        self.langevin_rng = substream(cfg.seed, "langevin")
        self.iteration = 0

    @classmethod
    def for_dataset(cls, spec, cfg, dataset, init=None, dtype=np.float64):
        batches = MinibatchStream.from_dataset(dataset, cfg.batch_size, substream(cfg.seed, "minibatch"))
        return cls(spec, cfg, batches, init=init, dtype=dtype)

    @property
    def finished(self):
        return self.iteration >= self.cfg.total_iters

    def step(self):
        t = self.iteration + 1
        batch = self.batches.next_batch()
        self.theta = sgld_step(self.theta, self.network, batch, self.cfg, self.langevin_rng, iteration=t)
        self.iteration = t
        return ChainSample(t, self.theta, self.cfg.is_retained(t), batch)

    def __iter__(self):
        while not self.finished:
            yield self.step()

    def state_dict(self):
        tag, data = self.theta.to_bytes()
        return {
            "iteration": self.iteration,
            "theta_dtype": tag,
            "theta": data,
            "langevin_rng": rng_state(self.langevin_rng),
            "batches": self.batches.state_dict(),
        }

    def load_state_dict(self, state):
        self.iteration = int(state["iteration"])
        self.theta = ParamVector.from_bytes(state["theta_dtype"], state["theta"], self.theta.layout)
        self.langevin_rng = restore_rng(state["langevin_rng"])
        self.batches.load_state_dict(state["batches"])


def run_chain(spec, init, data, cfg, on_sample=None):
    """
    Run T iterations; on_sample(sample) is called after every update.

    `data` is a dataset (minibatched from the cfg seed) or a MinibatchStream.
    Samples with t > B and (t - B) % tau == 0 carry retained=True.
    """
    if isinstance(data, MinibatchStream):
        chain = SGLDChain(spec, cfg, data, init=init)
    else:
        chain = SGLDChain.for_dataset(spec, cfg, data, init=init)
    for sample in chain:
        if on_sample is not None:
            on_sample(sample)
    return chain.theta


@dataclass
class PredictiveAccumulator:
    """Running sum of softmax outputs over retained samples"""

    prob_sum: np.ndarray
    sample_count: int = 0
    entropy_sum: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, test_size, classes):
        return cls(np.zeros((test_size, classes)), 0, np.zeros(test_size))

    def mean(self):
        if self.sample_count == 0:
            raise ValidationError("predictive average requested before any sample was accumulated")
        return self.prob_sum / self.sample_count

    def mean_sample_entropy(self):
        """Per-row average of the individual samples' predictive entropies"""
        if self.sample_count == 0:
            raise ValidationError("no samples accumulated")
        return self.entropy_sum / self.sample_count

    def state_dict(self):
        return {"prob_sum": self.prob_sum.copy(), "sample_count": self.sample_count,
                "entropy_sum": None if self.entropy_sum is None else self.entropy_sum.copy()}

    @classmethod
    def from_state(cls, state):
        entropy_sum = state.get("entropy_sum")
        return cls(np.asarray(state["prob_sum"]).copy(), int(state["sample_count"]),
                   None if entropy_sum is None else np.asarray(entropy_sum).copy())


def accumulate_predictive(acc, spec, theta, test_inputs, chunk_size=2000):
    """Add softmax(forward(test_inputs)) under theta (Eval mode) to the running sum"""
    network = _as_network(spec)
    for start in range(0, test_inputs.shape[0], chunk_size):
        chunk = test_inputs[start:start + chunk_size]
        probs = softmax(network.forward(theta, chunk, EVAL)).astype(np.float64, copy=False)
        acc.prob_sum[start:start + chunk.shape[0]] += probs
        if acc.entropy_sum is not None:
            acc.entropy_sum[start:start + chunk.shape[0]] += predictive_entropies(probs)
    acc.sample_count += 1
    return acc
