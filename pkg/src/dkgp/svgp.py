"""Sparse variational GP with whitened inducing variables.

For each output c the variational posterior over whitened inducing values v_c
is N(q_mu[:, c], L_c L_c^T), with u_c = L_zz v_c. In the unwhitened
parameterization this is q(u_c) = N(m_c, S_c) with m_c = L_zz q_mu[:, c] and
S_c = L_zz L_c L_c^T L_zz^T; the prior over v_c is standard normal.

``L_c`` is stored unconstrained as ``q_sqrt_raw``: its strict lower triangle
is L_c's, its diagonal is log diag(L_c), and its upper triangle is ignored.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .exact_gp import LOG_2PI, NonFiniteObjectiveError, net_weight_blocks
from .kernels import (
    ArdSeParams,
    DeepKernel,
    ard_se_matrix,
    base_of,
    features,
    kernel_matrix,
    mean_abs_correlation_from_gram,
)
from .linalg import RandomStream, cholesky_with_jitter
from .optim import OptSchedule, adam_init, adam_step

VAR_FLOOR = 1e-12
# relative diagonal jitter on K_zz; keeps near-duplicate inducing inputs
# factorizable while perturbing the bound by O(1e-12 * N / sigma_n2)
KZZ_JITTER = 1e-12


@dataclass(frozen=True)
class GaussianLikelihood:
    log_sigma_n2: object = -4.0

    @property
    def sigma_n2(self) -> float:
        return float(np.exp(ad.value(self.log_sigma_n2)))


@dataclass(frozen=True)
class SoftmaxLikelihood:
    num_classes: int
    mc_samples: int = 10

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")


@dataclass(frozen=True)
class VariationalState:
    Z: object  # (M, Q)
    q_mu: object  # (M, C)
    # (C, M, M) lower triangular with positive diagonal; a list of taped
    # factors while gradients are being computed
    q_sqrt: object

    @classmethod
    def prior(cls, Z, num_outputs: int = 1) -> "VariationalState":
        Z = np.asarray(Z, dtype=np.float64)
        M = Z.shape[0]
        if M < 1:
            raise ValueError("need at least one inducing point")
        return cls(Z, np.zeros((M, num_outputs)), np.tile(np.eye(M), (num_outputs, 1, 1)))

    @property
    def num_inducing(self) -> int:
        return np.shape(ad.value(self.Z))[0]

    @property
    def num_outputs(self) -> int:
        return np.shape(ad.value(self.q_mu))[1]


def _raw_from_sqrt(q_sqrt) -> np.ndarray:
    q_sqrt = np.asarray([ad.value(L) for L in q_sqrt], dtype=np.float64)
    d = np.einsum("cii->ci", q_sqrt)
    if np.any(d <= 0):
        raise ValueError("variational factor needs a positive diagonal")
    raw = np.tril(q_sqrt, -1)
    idx = np.arange(q_sqrt.shape[1])
    raw[:, idx, idx] = np.log(d)
    return raw


def _sqrt_from_raw(raw, c: int):
    R = raw[c]
    return ad.tril(R, -1) + ad.diag(ad.exp(ad.diag_part(R)))


@dataclass(frozen=True)
class SvgpModel:
    kernel: ArdSeParams | DeepKernel
    variational: VariationalState
    likelihood: GaussianLikelihood | SoftmaxLikelihood

    def __post_init__(self):
        q = np.shape(ad.value(self.variational.Z))[1]
        base_dim = np.size(ad.value(base_of(self.kernel).log_lengthscales))
        if base_dim not in (1, q):
            raise ValueError(f"kernel feature width {base_dim} does not match Z width {q}")

    def named_arrays(self) -> dict:
        v = self.variational
        out = {
            **self.kernel.named_arrays(),
            "Z": v.Z,
            "q_mu": v.q_mu,
            "q_sqrt_raw": _raw_from_sqrt(v.q_sqrt),
        }
        if isinstance(self.likelihood, GaussianLikelihood):
            out["log_sigma_n2"] = self.likelihood.log_sigma_n2
        return out

    def replace_arrays(self, arrays: Mapping) -> "SvgpModel":
        raw = arrays["q_sqrt_raw"]
        C = np.shape(ad.value(raw))[0]
        factors = [_sqrt_from_raw(raw, c) for c in range(C)]
        if not any(isinstance(f, ad.Var) for f in factors):
            factors = np.stack(factors)
        var = VariationalState(arrays["Z"], arrays["q_mu"], factors)
        lik = self.likelihood
        if isinstance(lik, GaussianLikelihood):
            lik = GaussianLikelihood(arrays["log_sigma_n2"])
        return SvgpModel(self.kernel.replace_arrays(arrays), var, lik)

    def to_params(self) -> ParamVector:
        return ParamVector({k: ad.value(v) for k, v in self.named_arrays().items()})

    def with_params(self, params: ParamVector | Mapping) -> "SvgpModel":
        arrays = params.as_dict() if isinstance(params, ParamVector) else params
        return self.replace_arrays(arrays)


# ---------------------------------------------------------------------------
# KL and predictive


def kl_whitened(state: VariationalState):
    """KL(q(v) || N(0, I)) summed over outputs."""
    M = state.num_inducing
    total = 0.0
    for c in range(state.num_outputs):
        L = state.q_sqrt[c]
        d = ad.diag_part(L)
        if np.any(np.asarray(ad.value(d)) <= 0):
            raise ValueError("variational factor has a nonpositive diagonal")
        m = state.q_mu[:, c]
        total = total + 0.5 * (ad.sum(m * m) + ad.sum(L * L) - M - 2.0 * ad.sum(ad.log(d)))
    return total


def _projection(model: SvgpModel, Xs):
    """A = L_zz^{-1} K(Z, g(Xs)), and the prior variance at Xs."""
    base = base_of(model.kernel)
    Fs = features(model.kernel, Xs)
    Z = model.variational.Z
    M = np.shape(ad.value(Z))[0]
    Kzz = ard_se_matrix(base, Z) + KZZ_JITTER * ad.exp(base.log_sigma_f2) * np.eye(M)
    Lzz = ad.cholesky(Kzz)
    Kzx = ard_se_matrix(base, Z, Fs)
    A = ad.solve_triangular(Lzz, Kzx)
    n = np.shape(ad.value(Fs))[0]
    kss = ad.exp(base.log_sigma_f2) * np.ones(n)
    return A, kss, Fs


def predict_latent(model: SvgpModel, Xs):
    """Marginal means and variances of every latent output at Xs, each (N, C)."""
    A, kss, _ = _projection(model, Xs)
    v = model.variational
    mean = ad.matmul(ad.transpose(A), v.q_mu)
    reduced = kss - ad.sum(A * A, axis=0)
    cols = []
    for c in range(v.num_outputs):
        B = ad.matmul(ad.transpose(v.q_sqrt[c]), A)
        cols.append(reduced + ad.sum(B * B, axis=0))
    var = ad.stack_columns(cols)
    return mean, var


def optimal_variational_state(model: SvgpModel, X, y) -> VariationalState:
    """Closed-form optimal whitened q(v) for a Gaussian likelihood at fixed Z."""
    if not isinstance(model.likelihood, GaussianLikelihood):
        raise ValueError("closed-form q needs a Gaussian likelihood")
    A, _, _ = _projection(model, np.asarray(X, dtype=np.float64))
    A = np.asarray(A)
    s2 = model.likelihood.sigma_n2
    M = A.shape[0]
    prec = np.eye(M) + A @ A.T / s2
    Lp = np.linalg.cholesky(prec)
    cov = ad.cho_solve(Lp, np.eye(M))
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (A @ np.asarray(y, dtype=np.float64).ravel()) / s2
    Ls = cholesky_with_jitter(cov, 1e-12).lower
    return VariationalState(np.asarray(ad.value(model.variational.Z)), mean[:, None], Ls[None])


# ---------------------------------------------------------------------------
# ELBOs


def expected_log_lik_gaussian(model: SvgpModel, Xb, yb):
    mean, var = predict_latent(model, Xb)
    yc = np.asarray(yb, dtype=np.float64).reshape(-1, 1)
    log_s2 = model.likelihood.log_sigma_n2
    s2 = ad.exp(log_s2)
    r = yc - mean
    n = yc.shape[0]
    return -0.5 * n * LOG_2PI - 0.5 * n * log_s2 - 0.5 * ad.sum((r * r + var) / s2)


def elbo_gaussian(model: SvgpModel, Xb, yb, n_total: int, parts: dict | None = None):
    """Minibatch ELBO estimate: (N/|b|) sum_b E_q[log N(y|f, s2)] - KL."""
    if not isinstance(model.likelihood, GaussianLikelihood):
        raise ValueError("elbo_gaussian needs a Gaussian likelihood")
    if np.exp(ad.value(model.likelihood.log_sigma_n2)) <= 0:
        raise ValueError("noise variance must be positive")
    nb = np.shape(np.asarray(yb).reshape(-1))[0]
    if nb == 0:
        raise ValueError("empty batch")
    ell = expected_log_lik_gaussian(model, Xb, yb) * (n_total / nb)
    kl = kl_whitened(model.variational)
    if parts is not None:
        parts.update(expected_ll=ell, kl=kl)
    return ell - kl


def expected_log_lik_softmax(model: SvgpModel, Xb, labels, stream: RandomStream):
    lik = model.likelihood
    labels = np.asarray(labels, dtype=int).ravel()
    C = lik.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in 0..{C - 1}")
    mean, var = predict_latent(model, Xb)
    eps = stream.normal((lik.mc_samples, labels.size, C))
    f = mean + ad.sqrt(ad.clamp_min(var, VAR_FLOOR)) * eps
    logp = ad.log_softmax(f, axis=-1)
    onehot = np.eye(C)[labels]
    return ad.sum(logp * onehot) / lik.mc_samples


def elbo_softmax_mc(model: SvgpModel, Xb, labels, n_total: int, stream: RandomStream, parts: dict | None = None):
    """Reparameterized Monte Carlo ELBO for a softmax likelihood."""
    if not isinstance(model.likelihood, SoftmaxLikelihood):
        raise ValueError("elbo_softmax_mc needs a softmax likelihood")
    nb = np.asarray(labels).size
    if nb == 0:
        raise ValueError("empty batch")
    ell = expected_log_lik_softmax(model, Xb, labels, stream) * (n_total / nb)
    kl = kl_whitened(model.variational)
    if parts is not None:
        parts.update(expected_ll=ell, kl=kl)
    return ell - kl


def elbo(model: SvgpModel, Xb, yb, n_total, stream=None, parts=None):
    if isinstance(model.likelihood, GaussianLikelihood):
        return elbo_gaussian(model, Xb, yb, n_total, parts)
    return elbo_softmax_mc(model, Xb, yb, n_total, stream, parts)


def full_elbo(model: SvgpModel, X, y, stream=None, chunk: int = 2048) -> float:
    """ELBO on the whole dataset, evaluated in chunks (no gradients)."""
    n = len(y)
    ell = 0.0
    for s in range(0, n, chunk):
        Xb, yb = X[s : s + chunk], y[s : s + chunk]
        if isinstance(model.likelihood, GaussianLikelihood):
            ell += float(ad.value(expected_log_lik_gaussian(model, Xb, yb)))
        else:
            ell += float(ad.value(expected_log_lik_softmax(model, Xb, yb, stream)))
    return ell - float(ad.value(kl_whitened(model.variational)))


def predict_y(model: SvgpModel, Xs):
    """Gaussian predictive mean and variance of observations (single output)."""
    mean, var = predict_latent(model, np.asarray(Xs, dtype=np.float64))
    return np.asarray(mean)[:, 0], np.asarray(var)[:, 0] + model.likelihood.sigma_n2


def predict_proba(model: SvgpModel, Xs, stream: RandomStream, samples: int = 256) -> np.ndarray:
    mean, var = predict_latent(model, np.asarray(Xs, dtype=np.float64))
    mean, var = np.asarray(mean), np.maximum(np.asarray(var), 0.0)
    eps = stream.normal((samples, *mean.shape))
    f = mean + np.sqrt(var) * eps
    return np.exp(ad.log_softmax(f, axis=-1)).mean(axis=0)


# ---------------------------------------------------------------------------
# inducing-point initialization


def init_inducing_kmeans(X_features, M: int, stream: RandomStream, max_iter: int = 25) -> np.ndarray:
    """k-means++ seeding followed by at most ``max_iter`` Lloyd iterations."""
    X = np.asarray(X_features, dtype=np.float64)
    N = X.shape[0]
    if M > N:
        raise ValueError(f"cannot place {M} inducing points on {N} inputs")
    if M < 1:
        raise ValueError("M must be positive")
    chosen = [int(stream.integers(0, N))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, M):
        total = d2.sum()
        if total > 0:
            idx = int(stream.choice(N, p=d2 / total))
        else:
            remaining = np.setdiff1d(np.arange(N), chosen)
            idx = int(remaining[stream.integers(0, remaining.size)])
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    centers = X[chosen].copy()
    for _ in range(max_iter):
        dist = (
            np.sum(X * X, axis=1)[:, None]
            + np.sum(centers * centers, axis=1)[None, :]
            - 2.0 * X @ centers.T
        )
        assign = np.argmin(dist, axis=1)
        new = centers.copy()
        for k in range(M):
            members = assign == k
            if np.any(members):
                new[k] = X[members].mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


# ---------------------------------------------------------------------------
# training


@dataclass
class SvgpTraceRecord:
    step: int
    total: float
    data_fit: float
    complexity: float
    sigma_f2: float
    sigma_n2: float | None
    mean_abs_corr: float
    elbo: float
    expected_ll: float
    kl: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass(frozen=True)
class SvgpSchedule:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    decay_points: tuple[int, ...] = ()
    decay_factor: float = 0.1

    def as_opt(self) -> OptSchedule:
        return OptSchedule(self.steps, self.lr, self.decay_points, (), self.decay_factor)


def minibatches(n: int, batch_size: int, stream: RandomStream):
    """Endless sequence of disjoint shuffled batches, one permutation per epoch."""
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch size must lie in 1..{n}")
    while True:
        perm = stream.permutation(n) if batch_size < n else np.arange(n)
        for s in range(0, n, batch_size):
            yield perm[s : s + batch_size]


def fit_svgp(
    model: SvgpModel,
    X,
    y,
    schedule: SvgpSchedule,
    stream: RandomStream,
    *,
    freeze_net: bool = False,
    train_inducing: bool = True,
    weight_decay: float = 0.0,
    trace_every: int = 1,
) -> tuple[SvgpModel, list[SvgpTraceRecord]]:
    """Adam on variational parameters, hyperparameters and (unless frozen) net weights."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    theta = model.to_params()
    frozen_names = []
    if freeze_net:
        frozen_names += [k for k in theta.names if k.startswith("net.")]
    if not train_inducing:
        frozen_names.append("Z")
    frozen = theta.mask(frozen_names) if frozen_names else None
    wd = {k: weight_decay for k in net_weight_blocks(theta)} if weight_decay and not freeze_net else None
    state = adam_init(theta, schedule.lr, weight_decay=wd)
    opt = schedule.as_opt()
    batches = minibatches(n, schedule.batch_size, stream.split(0))
    mc_stream = stream.split(1)
    traces: list[SvgpTraceRecord] = []
    captured: dict = {}

    for step in range(schedule.steps):
        idx = next(batches)
        Xb, yb = X[idx], y[idx]

        def objective(view):
            m = model.replace_arrays(view)
            parts: dict = {}
            val = elbo(m, Xb, yb, n, mc_stream, parts)
            captured.update(parts, model=m)
            return -val

        val, g = ad.gradient(objective, theta)
        if not math.isfinite(val):
            raise NonFiniteObjectiveError(f"non-finite ELBO at step {step}", traces)
        if step % trace_every == 0 or step == schedule.steps - 1:
            traces.append(_svgp_record(step, -val, captured, Xb))
        state = replace(state, lr=opt.lr_at(step))
        state, new_theta = adam_step(state, theta, g)
        if frozen is not None:
            flat = new_theta.data.copy()
            flat[frozen] = theta.data[frozen]
            new_theta = theta.with_data(flat)
        theta = new_theta
    return model.with_params(theta), traces


def _svgp_record(step, elbo_val, captured, Xb) -> SvgpTraceRecord:
    m: SvgpModel = captured["model"]
    base = base_of(m.kernel)
    sf2 = float(np.exp(ad.value(base.log_sigma_f2)))
    if Xb.shape[0] >= 2:
        kern = m.kernel.replace_arrays({k: ad.value(v) for k, v in m.kernel.named_arrays().items()})
        corr = mean_abs_correlation_from_gram(np.asarray(kernel_matrix(kern, Xb)), sf2)
    else:
        corr = 1.0
    ell = float(ad.value(captured["expected_ll"]))
    kl = float(ad.value(captured["kl"]))
    s2 = m.likelihood.sigma_n2 if isinstance(m.likelihood, GaussianLikelihood) else None
    return SvgpTraceRecord(step, elbo_val, ell, -kl, sf2, s2, corr, elbo_val, ell, kl)
