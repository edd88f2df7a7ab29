"""HMC and SGLD over network weights and kernel hyperparameters.

The potential is U(theta) = negative log-likelihood term + Gaussian prior
energy sum_i theta_i^2 / (2 var_i). For exact models the likelihood term is
the negative log marginal likelihood; for minibatch models it is the negative
training objective with its data term scaled by N / |batch|.

Positions are handled as flat float64 vectors internally and exposed as
ParamVectors holding only the sampled blocks.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .exact_gp import GpModel, lml_terms, predict
from .feature_net import load_params, save_params
from .linalg import RandomStream


class NonFiniteGradientError(FloatingPointError):
    pass


class ChainDivergedError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class PotentialSpec:
    kind: str = "exact-lml"  # or "minibatch"
    weight_prior_var: float = 1.0
    hyper_prior_var: float = 10.0
    # per-block overrides, by block name
    block_prior_var: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("exact-lml", "minibatch"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        variances = [self.weight_prior_var, self.hyper_prior_var, *self.block_prior_var.values()]
        if any(not v > 0 for v in variances):
            raise ValueError("prior variances must be positive")

    def variance_for(self, block: str) -> float:
        if block in self.block_prior_var:
            return self.block_prior_var[block]
        return self.weight_prior_var if block.startswith("net.") else self.hyper_prior_var


class Potential:
    """Energy over a subset of parameter blocks.

    ``nll(view, batch)`` returns the likelihood part of the energy on the
    taped parameter dict ``view``; ``batch`` is an index array, or None for
    the full data. Blocks of ``template`` outside ``free`` stay fixed.
    """

    def __init__(
        self,
        nll: Callable[[dict, np.ndarray | None], object],
        template: ParamVector,
        prior_var: Mapping[str, float] | None = None,
        free: Sequence[str] | None = None,
        n_data: int = 1,
    ):
        self.nll = nll
        self.template = template
        self.free = list(template.names if free is None else free)
        missing = [b for b in self.free if b not in template]
        if missing:
            raise KeyError(f"unknown blocks {missing}")
        self.fixed = {k: v for k, v in template.as_dict().items() if k not in self.free}
        self.layout = ParamVector({k: template[k] for k in self.free})
        var = np.ones(self.layout.size)
        for name, v in (prior_var or {}).items():
            if name in self.layout:
                var[self.layout.slice_of(name)] = v
        if np.any(var <= 0):
            raise ValueError("prior variances must be positive")
        self.prior_var = var
        self.n_data = n_data

    def initial(self) -> np.ndarray:
        return self.layout.data.copy()

    def as_params(self, flat) -> ParamVector:
        return self.layout.with_data(np.asarray(flat, dtype=np.float64))

    def _nll(self, batch):
        return lambda view: self.nll({**self.fixed, **view}, batch)

    def prior_energy(self, flat) -> tuple[float, np.ndarray]:
        """Gaussian prior energy and its gradient, computed directly."""
        scaled = np.asarray(flat) / self.prior_var
        return 0.5 * float(np.dot(scaled, flat)), scaled

    def energy(self, flat, batch=None) -> float:
        return ad.evaluate(self._nll(batch), self.as_params(flat)) + self.prior_energy(flat)[0]

    def energy_and_grad(self, flat, batch=None) -> tuple[float, np.ndarray]:
        val, g = ad.gradient(self._nll(batch), self.as_params(flat))
        pe, pg = self.prior_energy(flat)
        return val + pe, g.data + pg


def exact_gp_potential(model: GpModel, X, y, spec: PotentialSpec | None = None, free=None) -> Potential:
    """Negative LML plus prior energy for an exact (deep-kernel) GP."""
    spec = spec or PotentialSpec()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()

    def nll(view, batch):
        const, fit, comp, _ = lml_terms(model.replace_arrays(view), X, y)
        return -(const + fit + comp)

    template = model.to_params()
    prior = {n: spec.variance_for(n) for n in template.names}
    return Potential(nll, template, prior, free, n_data=len(y))


def svgp_potential(model, X, y, spec: PotentialSpec | None = None, free=None, stream: RandomStream | None = None):
    """Negative minibatch ELBO (data term scaled by N/|b|) plus prior energy.

    By default only kernel hyperparameters, network weights and the noise are
    sampled; inducing inputs and variational parameters stay fixed.
    """
    from .svgp import elbo

    spec = spec or PotentialSpec(kind="minibatch")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = len(y)
    mc = stream or RandomStream(0)

    def nll(view, batch):
        idx = np.arange(n) if batch is None else batch
        return -elbo(model.replace_arrays(view), X[idx], y[idx], n, mc)

    template = model.to_params()
    if free is None:
        free = [b for b in template.names if b not in ("Z", "q_mu", "q_sqrt_raw")]
    prior = {n_: spec.variance_for(n_) for n_ in template.names}
    return Potential(nll, template, prior, free, n_data=n)


def gaussian_potential(mean, cov) -> Potential:
    """Data-free Gaussian target N(mean, cov); prior energy switched off."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    prec = np.linalg.inv(np.atleast_2d(np.asarray(cov, dtype=np.float64)))

    def nll(view, batch):
        r = view["x"] - mean
        return 0.5 * ad.sum(r * ad.matmul(prec, r))

    return Potential(nll, ParamVector({"x": mean.copy()}), {"x": np.inf})


# ---------------------------------------------------------------------------
# HMC


def _check_finite(g):
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("non-finite gradient in leapfrog")


def _leapfrog(grad_fn, theta, p, eps, L, g0):
    theta = theta.copy()
    p = p - 0.5 * eps * g0
    U, g = None, g0
    for i in range(L):
        theta = theta + eps * p
        U, g = grad_fn(theta)
        _check_finite(g)
        if i < L - 1:
            p = p - eps * g
    p = p - 0.5 * eps * g
    return theta, p, U, g


def leapfrog(potential, theta, p, eps: float, L: int):
    """L leapfrog steps with unit mass. ``potential`` is a Potential or a
    function returning (energy, gradient) for a flat position."""
    if not eps > 0:
        raise ValueError("step size must be positive")
    if L < 1:
        raise ValueError("need at least one leapfrog step")
    grad_fn = potential.energy_and_grad if isinstance(potential, Potential) else potential
    theta = np.asarray(theta, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _, g0 = grad_fn(theta)
    _check_finite(g0)
    th, pn, _, _ = _leapfrog(grad_fn, theta, p, eps, L, g0)
    return th, pn


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.005
    n_leapfrog: int = 20
    burn_in: int = 10_000
    samples: int = 1000
    thin: int = 10
    max_nonfinite: int = 100

    def __post_init__(self):
        if not self.step_size > 0 or self.n_leapfrog < 0 or self.burn_in < 0 or self.samples < 0 or self.thin < 1:
            raise ValueError("invalid HMC configuration")


@dataclass
class ChainState:
    position: ParamVector
    momentum: np.ndarray | None
    step_size: float
    n_leapfrog: int
    samples: list[ParamVector] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    accepted: int = 0
    proposed: int = 0
    accept_probs: list[float] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    @property
    def mean_accept_prob(self) -> float:
        return float(np.mean(self.accept_probs)) if self.accept_probs else 0.0

    def sample_matrix(self) -> np.ndarray:
        return np.stack([s.data for s in self.samples]) if self.samples else np.zeros((0, self.position.size))


def hmc_run(
    potential: Potential,
    theta0,
    config: HmcConfig,
    stream: RandomStream,
    callback: Callable[[int, float], None] | None = None,
) -> ChainState:
    """Leapfrog proposals with a Metropolis correction; unit mass matrix."""
    theta = np.asarray(theta0.data if isinstance(theta0, ParamVector) else theta0, dtype=np.float64).copy()
    U, g = potential.energy_and_grad(theta)
    if not (math.isfinite(U) and np.all(np.isfinite(g))):
        raise ChainDivergedError("initial potential is not finite")
    chain = ChainState(potential.as_params(theta), None, config.step_size, config.n_leapfrog)
    mom_stream, acc_stream = stream.split(0), stream.split(1)
    bad_run = 0
    total = config.burn_in + config.samples
    for it in range(total):
        p = mom_stream.normal(theta.shape)
        H0 = U + 0.5 * float(p @ p)
        try:
            if config.n_leapfrog == 0:
                th_new, p_new, U_new, g_new = theta, p, U, g
            else:
                th_new, p_new, U_new, g_new = _leapfrog(
                    potential.energy_and_grad, theta, p, config.step_size, config.n_leapfrog, g
                )
            H1 = U_new + 0.5 * float(p_new @ p_new)
            ok = math.isfinite(H1)
        except (NonFiniteGradientError, np.linalg.LinAlgError, FloatingPointError):
            ok = False
        u = acc_stream.uniform()
        chain.proposed += 1
        if ok:
            bad_run = 0
            alpha = 1.0 if H1 <= H0 else math.exp(H0 - H1)
            chain.accept_probs.append(alpha)
            if u < alpha:
                theta, U, g = th_new, U_new, g_new
                chain.accepted += 1
                chain.momentum = p_new
        else:
            chain.accept_probs.append(0.0)
            bad_run += 1
            if bad_run >= config.max_nonfinite:
                raise ChainDivergedError(f"{bad_run} consecutive non-finite proposals at iteration {it}")
        if it >= config.burn_in and (it - config.burn_in) % config.thin == config.thin - 1:
            chain.samples.append(potential.as_params(theta))
            chain.energies.append(U)
        if callback is not None:
            callback(it, U)
    chain.position = potential.as_params(theta)
    return chain


# ---------------------------------------------------------------------------
# SGLD


@dataclass(frozen=True)
class SgldConfig:
    lr0: float = 1e-4
    decay: float = 0.4  # lr at epoch e is lr0 / (1 + decay * e)
    burn_in_epochs: int = 100
    sample_epochs: int = 100
    batch_size: int = 32
    sample_every: int = 2
    noise_scale: float = 1.0

    def __post_init__(self):
        if not self.lr0 > 0 or self.decay < 0 or self.batch_size < 1 or self.sample_every < 1:
            raise ValueError("invalid SGLD configuration")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 / (1.0 + self.decay * epoch)


def sgld_run(
    potential: Potential,
    theta0,
    config: SgldConfig,
    stream: RandomStream,
    callback: Callable[[int, float], None] | None = None,
) -> ChainState:
    """theta <- theta - (eta/2) grad U_batch + noise_scale * sqrt(eta) xi."""
    theta = np.asarray(theta0.data if isinstance(theta0, ParamVector) else theta0, dtype=np.float64).copy()
    n = potential.n_data
    bs = min(config.batch_size, n)
    chain = ChainState(potential.as_params(theta), None, config.lr0, 0)
    batch_stream, noise_stream = stream.split(0), stream.split(1)
    epochs = config.burn_in_epochs + config.sample_epochs
    U = float("nan")
    for epoch in range(epochs):
        eta = config.lr_at(epoch)
        order = batch_stream.permutation(n) if bs < n else None
        for s in range(0, n, bs):
            batch = None if order is None else order[s : s + bs]
            xi = noise_stream.normal(theta.shape)
            new = None
            for step in (eta, 0.5 * eta):
                try:
                    U, g = potential.energy_and_grad(theta, batch)
                except (np.linalg.LinAlgError, FloatingPointError):
                    continue
                cand = theta - 0.5 * step * g + config.noise_scale * math.sqrt(step) * xi
                if math.isfinite(U) and np.all(np.isfinite(cand)):
                    new = cand
                    break
            if new is None:
                raise ChainDivergedError(f"non-finite SGLD update in epoch {epoch}")
            theta = new
            chain.proposed += 1
            chain.accepted += 1
        e = epoch - config.burn_in_epochs
        if e >= 0 and e % config.sample_every == 0:
            chain.samples.append(potential.as_params(theta))
            chain.energies.append(U)
        if callback is not None:
            callback(epoch, U)
    chain.position = potential.as_params(theta)
    chain.step_size = config.lr_at(max(epochs - 1, 0))
    return chain


# ---------------------------------------------------------------------------
# predictive averaging


@dataclass(frozen=True)
class MixturePredictive:
    """Equal-weight mixture of per-sample Gaussian predictives."""

    means: np.ndarray  # (S, N)
    variances: np.ndarray  # (S, N)

    @property
    def mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    @property
    def var(self) -> np.ndarray:
        second = np.mean(self.variances + self.means**2, axis=0)
        return np.maximum(second - self.mean**2, 0.0)

    def log_density(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        comp = -0.5 * (np.log(2 * np.pi * self.variances) + (y - self.means) ** 2 / self.variances)
        top = comp.max(axis=0)
        return top + np.log(np.mean(np.exp(comp - top), axis=0))


def mixture_predictive(means, variances) -> MixturePredictive:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
    if means.shape[0] == 0:
        raise ValueError("empty chain")
    if means.shape != variances.shape:
        raise ValueError("means and variances differ in shape")
    return MixturePredictive(means, variances)


def _samples_of(chain) -> list[ParamVector]:
    samples = chain.samples if isinstance(chain, ChainState) else list(chain)
    if not samples:
        raise ValueError("empty chain")
    return samples


def predictive_average(chain, template: GpModel, X, y, Xs, with_noise: bool = True) -> MixturePredictive:
    """Posterior predictive of an exact GP averaged over retained samples."""
    base = template.to_params().as_dict()
    means, variances = [], []
    for s in _samples_of(chain):
        model = template.with_params({**base, **s.as_dict()})
        pred = predict(model, X, y, Xs, with_noise=with_noise, full_cov=False)
        means.append(pred.mean)
        variances.append(np.maximum(pred.var, 1e-300))
    return mixture_predictive(means, variances)


def average_probabilities(prob_list) -> np.ndarray:
    probs = [np.asarray(p, dtype=np.float64) for p in prob_list]
    if not probs:
        raise ValueError("empty chain")
    return np.mean(probs, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_chain(directory, chain: ChainState) -> None:
    """One parameter file per retained sample plus manifest.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (s, U) in enumerate(zip(chain.samples, chain.energies)):
        name = f"sample_{i:05d}.params"
        save_params(d / name, s)
        entries.append({"index": i, "file": name, "potential": float(U)})
    manifest = {
        "samples": entries,
        "acceptance_rate": chain.acceptance_rate,
        "step_size": chain.step_size,
        "n_leapfrog": chain.n_leapfrog,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_chain(directory) -> tuple[list[ParamVector], list[float]]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    samples = [load_params(d / e["file"]) for e in manifest["samples"]]
    return samples, [e["potential"] for e in manifest["samples"]]
