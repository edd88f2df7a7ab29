"""Exact GP regression: decomposed marginal likelihood, prediction, training."""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .kernels import (
    ArdSeParams,
    DeepKernel,
    base_of,
    kernel_matrix,
    mean_abs_correlation_from_gram,
)
from .linalg import cholesky_with_jitter, solve_posdef
from .optim import OptSchedule, adam_init, adam_step

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class GpModel:
    kernel: ArdSeParams | DeepKernel
    log_sigma_n2: object = math.log(0.1)

    @property
    def sigma_n2(self) -> float:
        return float(np.exp(ad.value(self.log_sigma_n2)))

    @property
    def sigma_f2(self) -> float:
        return self.kernel.sigma_f2

    def named_arrays(self) -> dict:
        return {**self.kernel.named_arrays(), "log_sigma_n2": self.log_sigma_n2}

    def replace_arrays(self, arrays: Mapping) -> "GpModel":
        return GpModel(self.kernel.replace_arrays(arrays), arrays["log_sigma_n2"])

    def to_params(self) -> ParamVector:
        return ParamVector({k: ad.value(v) for k, v in self.named_arrays().items()})

    def with_params(self, params: ParamVector | Mapping) -> "GpModel":
        arrays = params.as_dict() if isinstance(params, ParamVector) else params
        return self.replace_arrays(arrays)


@dataclass(frozen=True)
class LmlBreakdown:
    total: float
    data_fit: float
    complexity: float
    constant: float


@dataclass(frozen=True)
class PosteriorPredictive:
    mean: np.ndarray
    cov: np.ndarray  # full covariance, or marginal variances when 1-D
    includes_noise: bool = False

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy() if self.cov.ndim == 2 else self.cov


@dataclass
class TraceRecord:
    step: int
    total: float
    data_fit: float
    complexity: float
    sigma_f2: float
    sigma_n2: float
    mean_abs_corr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _column(y):
    yv = np.asarray(y, dtype=np.float64)
    return yv.reshape(-1, 1)


def lml_terms(model: GpModel, X, y, base_jitter: float = 1e-6):
    """(constant, data_fit, complexity, K) on the tape when parameters are Vars."""
    yc = _column(y)
    n = yc.shape[0]
    K = kernel_matrix(model.kernel, X)
    Ky = K + ad.exp(model.log_sigma_n2) * np.eye(n)
    L = ad.cholesky(Ky, base_jitter)
    alpha = ad.solve_triangular(L, yc)
    data_fit = -0.5 * ad.sum(alpha * alpha)
    complexity = -ad.sum(ad.log(ad.diag_part(L)))
    return -0.5 * n * LOG_2PI, data_fit, complexity, K


def log_marginal_decomposed(model: GpModel, X, y) -> LmlBreakdown:
    """log N(y | 0, K + sigma_n^2 I) split into constant, data-fit and complexity."""
    yv = np.asarray(y, dtype=np.float64).ravel()
    if yv.size < 1 or not np.all(np.isfinite(yv)):
        raise ValueError("targets must be a nonempty finite vector")
    const, fit, comp, _ = lml_terms(model, X, yv)
    fit, comp = float(ad.value(fit)), float(ad.value(comp))
    return LmlBreakdown(const + fit + comp, fit, comp, const)


def negative_lml_objective(template: GpModel, X, y):
    """Closure over data returning -LML of the named parameter blocks."""

    def objective(view):
        const, fit, comp, _ = lml_terms(template.replace_arrays(view), X, y)
        return -(fit + comp + const)

    return objective


def optimal_signal_variance(model: GpModel, X, y) -> float:
    """Signal variance maximizing the LML with the noise ratio held fixed.

    The noise is read as sigma_n^2 = ratio * sigma_f^2 with
    ratio = model.sigma_n2 / model.sigma_f2; the normalized Gram matrix is the
    model's kernel with unit signal variance. Returns
    y^T (K_hat + ratio I)^{-1} y / N, which is 0 for y = 0.
    """
    yv = np.asarray(y, dtype=np.float64).ravel()
    n = yv.size
    if n < 1:
        raise ValueError("need at least one target")
    ratio = model.sigma_n2 / model.sigma_f2
    if ratio <= 0:
        raise ValueError("noise ratio must be positive")
    K_hat = np.asarray(kernel_matrix(model.kernel, X)) / model.sigma_f2
    F = cholesky_with_jitter(K_hat + ratio * np.eye(n))
    return float(yv @ solve_posdef(F, yv)) / n


def with_signal_variance(model: GpModel, sigma_f2: float, keep_ratio: bool = True) -> GpModel:
    """Set sigma_f^2, rescaling the noise so the noise ratio is unchanged."""
    sigma_f2 = max(sigma_f2, 1e-10)
    base = base_of(model.kernel)
    new_base = replace(base, log_sigma_f2=float(np.log(sigma_f2)))
    kernel = replace(model.kernel, base=new_base) if isinstance(model.kernel, DeepKernel) else new_base
    log_n2 = model.log_sigma_n2
    if keep_ratio:
        log_n2 = float(ad.value(model.log_sigma_n2) - ad.value(base.log_sigma_f2) + np.log(sigma_f2))
    return GpModel(kernel, log_n2)


def predict(model: GpModel, X, y, Xs, with_noise: bool = False, full_cov: bool = True) -> PosteriorPredictive:
    """Closed-form posterior of the latent function (plus noise if requested) at Xs."""
    Xs = np.asarray(Xs, dtype=np.float64)
    Kss = np.asarray(kernel_matrix(model.kernel, Xs))
    yv = np.asarray(y, dtype=np.float64).ravel()
    n = yv.size
    if n == 0:
        mean = np.zeros(Xs.shape[0])
        cov = Kss.copy()
    else:
        X = np.asarray(X, dtype=np.float64)
        K = np.asarray(kernel_matrix(model.kernel, X))
        F = cholesky_with_jitter(K + model.sigma_n2 * np.eye(n))
        Ksx = np.asarray(kernel_matrix(model.kernel, Xs, X))
        mean = Ksx @ solve_posdef(F, yv)
        V = ad.solve_triangular(F.lower, Ksx.T)
        cov = Kss - V.T @ V
    if with_noise:
        cov = cov + model.sigma_n2 * np.eye(cov.shape[0])
    if not full_cov:
        return PosteriorPredictive(mean, np.diag(cov).copy(), with_noise)
    return PosteriorPredictive(mean, 0.5 * (cov + cov.T), with_noise)


def net_weight_blocks(params: ParamVector) -> list[str]:
    return [n for n in params.names if n.startswith("net.") and n.endswith(".W")]


def fit_full_batch(
    model: GpModel,
    X,
    y,
    schedule: OptSchedule,
    stream=None,
    *,
    weight_decay: float = 0.0,
    trainable: list[str] | None = None,
    trace_every: int = 1,
    callback=None,
) -> tuple[GpModel, list[TraceRecord]]:
    """Maximize the LML over all parameters with Adam.

    ``stream`` is accepted for interface symmetry; training is deterministic.
    ``weight_decay`` applies only to network weight matrices.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    theta = model.to_params()
    wd = {n: weight_decay for n in net_weight_blocks(theta)} if weight_decay else None
    state = adam_init(theta, schedule.lr, weight_decay=wd)
    frozen = None if trainable is None else ~theta.mask(trainable)
    traces: list[TraceRecord] = []
    captured = {}

    def objective(view):
        m = model.replace_arrays(view)
        const, fit, comp, K = lml_terms(m, X, y)
        captured.update(const=const, fit=fit, comp=comp, K=K, model=m)
        return -(fit + comp + const)

    def record(step):
        m = captured["model"]
        K = np.asarray(ad.value(captured["K"]))
        fit, comp = float(ad.value(captured["fit"])), float(ad.value(captured["comp"]))
        sf2 = float(np.exp(ad.value(base_of(m.kernel).log_sigma_f2)))
        corr = mean_abs_correlation_from_gram(K, sf2) if K.shape[0] >= 2 else 1.0
        return TraceRecord(
            step, captured["const"] + fit + comp, fit, comp, sf2,
            float(np.exp(ad.value(m.log_sigma_n2))), corr,
        )

    for step in range(schedule.steps + 1):
        val, g = ad.gradient(objective, theta)
        if not math.isfinite(val):
            traces.append(record(step))
            raise NonFiniteObjectiveError(f"non-finite LML at step {step}", traces)
        if step % trace_every == 0 or step == schedule.steps:
            traces.append(record(step))
            if callback is not None:
                callback(traces[-1])
        if step == schedule.steps:
            break
        state = replace(state, lr=schedule.lr_at(step))
        state, new_theta = adam_step(state, theta, g)
        if frozen is not None:
            flat = new_theta.data.copy()
            flat[frozen] = theta.data[frozen]
            new_theta = theta.with_data(flat)
        theta = new_theta
    return model.with_params(theta), traces


def default_dkl_model(net, feature_dim: int, shared_lengthscale: bool = False) -> GpModel:
    """DKL hyperparameter defaults: unit signal variance and lengthscales, log noise -4."""
    base = ArdSeParams.create(feature_dim, shared=shared_lengthscale)
    return GpModel(DeepKernel(base, net), -4.0)


def default_se_model(input_dim: int, shared_lengthscale: bool = False) -> GpModel:
    return GpModel(ArdSeParams.create(input_dim, shared=shared_lengthscale), math.log(0.1))

