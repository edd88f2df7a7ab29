"""ARD squared-exponential and deep kernels, plus prior-correlation diagnostics."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .feature_net import FeatureNetParams, forward


@dataclass(frozen=True)
class ArdSeParams:
    """Signal variance and squared lengthscales, both stored as logs.

    ``log_lengthscales`` holds log l_d^2 per input dimension; a length-1
    vector shares one lengthscale across all dimensions.
    """

    log_sigma_f2: object = 0.0
    log_lengthscales: object = np.zeros(1)

    @classmethod
    def create(cls, dim: int, sigma_f2: float = 1.0, lengthscale2: float = 1.0, shared: bool = False):
        n = 1 if shared else dim
        return cls(float(np.log(sigma_f2)), np.full(n, np.log(lengthscale2)))

    @property
    def sigma_f2(self) -> float:
        return float(np.exp(ad.value(self.log_sigma_f2)))

    def named_arrays(self) -> dict:
        return {"log_sigma_f2": self.log_sigma_f2, "log_lengthscales": self.log_lengthscales}

    def replace_arrays(self, arrays: Mapping) -> "ArdSeParams":
        return ArdSeParams(arrays["log_sigma_f2"], arrays["log_lengthscales"])


@dataclass(frozen=True)
class DeepKernel:
    base: ArdSeParams
    net: FeatureNetParams

    @property
    def sigma_f2(self) -> float:
        return self.base.sigma_f2

    def named_arrays(self) -> dict:
        return {**self.base.named_arrays(), **self.net.named_arrays()}

    def replace_arrays(self, arrays: Mapping) -> "DeepKernel":
        return DeepKernel(self.base.replace_arrays(arrays), self.net.replace_arrays(arrays))


def _cols(A) -> int:
    return np.shape(ad.value(A))[1]


def _scaled_sqdist(params: ArdSeParams, A, B):
    inv_l = ad.exp(-0.5 * params.log_lengthscales)
    As = A * inv_l
    Bs = As if B is A else B * inv_l
    a2 = ad.reshape(ad.sum(As * As, axis=1), (-1, 1))
    b2 = a2 if B is A else ad.sum(Bs * Bs, axis=1)
    b2 = ad.reshape(b2, (1, -1))
    cross = ad.matmul(As, ad.transpose(Bs))
    return ad.clamp_min(a2 + b2 - 2.0 * cross, 0.0)


def ard_se_matrix(params: ArdSeParams, A, B=None):
    """sigma_f^2 exp(-0.5 sum_d (a_d - b_d)^2 / l_d^2) for every row pair."""
    if B is None:
        B = A
    nl = np.size(ad.value(params.log_lengthscales))
    if _cols(A) != _cols(B) or nl not in (1, _cols(A)):
        raise ValueError(
            f"dimension mismatch: A has {_cols(A)} columns, B has {_cols(B)}, {nl} lengthscales"
        )
    d2 = _scaled_sqdist(params, A, B)
    return ad.exp(params.log_sigma_f2 - 0.5 * d2)


def ard_se_diag(params: ArdSeParams, n: int):
    return ad.exp(params.log_sigma_f2) * np.ones(n)


def deep_kernel_matrix(k: DeepKernel, A, B=None):
    FA = forward(k.net, A)
    FB = FA if B is None or B is A else forward(k.net, B)
    return ard_se_matrix(k.base, FA, FB)


def features(kernel, X):
    """Inputs as seen by the base kernel."""
    return forward(kernel.net, X) if isinstance(kernel, DeepKernel) else X


def base_of(kernel) -> ArdSeParams:
    return kernel.base if isinstance(kernel, DeepKernel) else kernel


def kernel_matrix(kernel, A, B=None):
    if isinstance(kernel, DeepKernel):
        return deep_kernel_matrix(kernel, A, B)
    return ard_se_matrix(kernel, A, B)


def correlation_profile(kernel, x_ref, X_grid) -> np.ndarray:
    """k(x, x_ref) / sigma_f^2 over the grid."""
    sf2 = kernel.sigma_f2
    if sf2 == 0:
        raise ValueError("signal variance is zero")
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=np.float64))
    X_grid = np.asarray(X_grid, dtype=np.float64)
    if X_grid.ndim == 1:
        X_grid = X_grid[:, None]
    k = np.asarray(kernel_matrix(kernel, X_grid, x_ref))[:, 0]
    return k / sf2


def mean_abs_correlation_from_gram(K: np.ndarray, sigma_f2: float) -> float:
    n = K.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    iu = np.triu_indices(n, 1)
    return float(np.mean(np.abs(K[iu])) / sigma_f2)


def mean_abs_correlation(kernel, X) -> float:
    """Mean of |k(x_i, x_j)| / sigma_f^2 over pairs i < j."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("need at least two points")
    return mean_abs_correlation_from_gram(np.asarray(kernel_matrix(kernel, X)), kernel.sigma_f2)
