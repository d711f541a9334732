"""Exact GP regression with a deep mean and a deep RBF kernel.

The kernel is a squared exponential over learned embeddings,

    k(x1, x2) = outputscale * exp(-||g(x1) - g(x2)||^2 / (2 * lengthscale^2)),

where g is a network head applied to shared extractor features. The mean
is a second head on the same features. Posteriors are exact, computed by
Cholesky factorization of the noisy Gram matrix, and the negative log
marginal likelihood comes with analytic gradients for every kernel-path
parameter so it can drive training directly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, SerializationError, ShapeError
from .nnet import NetworkSpec, ParamVector, forward_batch, vjp
from .serialize import container_bytes, parse_container

# Cholesky retry ladder: first attempt is unjittered, escalation starts at
# 1e-8 * outputscale and stops at 1e-4 * outputscale.
JITTER_START = 1e-8
JITTER_MAX = 1e-4

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DeepGpModel:
    """Shared feature extractor, mean head, kernel head and log hyperparameters.

    kernel_feature_params optionally overrides the extractor on the kernel
    path only; by default both heads read the same extractor.
    """

    feature_spec: NetworkSpec
    feature_params: ParamVector
    mean_spec: NetworkSpec
    mean_params: ParamVector
    kernel_spec: NetworkSpec
    kernel_params: ParamVector
    log_lengthscale: float
    log_outputscale: float
    log_noise: float
    kernel_feature_params: ParamVector | None = None

    def __post_init__(self):
        if self.mean_spec.output_dim != 1:
            raise ShapeError("mean head must have output_dim 1")
        if self.mean_spec.input_dim != self.feature_spec.output_dim:
            raise ShapeError("mean head input_dim must match extractor output_dim")
        if self.kernel_spec.input_dim != self.feature_spec.output_dim:
            raise ShapeError("kernel head input_dim must match extractor output_dim")
        for name in ("log_lengthscale", "log_outputscale", "log_noise"):
            val = float(getattr(self, name))
            if not np.isfinite(val):
                raise ShapeError(f"{name} must be finite")
            object.__setattr__(self, name, val)

    @property
    def input_dim(self) -> int:
        return self.feature_spec.input_dim

    @property
    def embed_dim(self) -> int:
        return self.kernel_spec.output_dim

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def outputscale(self) -> float:
        return float(np.exp(self.log_outputscale))

    @property
    def noise_std(self) -> float:
        return float(np.exp(self.log_noise))

    def with_hypers(self, log_lengthscale=None, log_outputscale=None, log_noise=None) -> "DeepGpModel":
        return replace(
            self,
            log_lengthscale=self.log_lengthscale if log_lengthscale is None else log_lengthscale,
            log_outputscale=self.log_outputscale if log_outputscale is None else log_outputscale,
            log_noise=self.log_noise if log_noise is None else log_noise,
        )


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: float
    variance: float


def _as_batch(model: DeepGpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"input batch shape {X.shape} does not match model input_dim {model.input_dim}")
    return X


def embed_batch(model: DeepGpModel, X) -> np.ndarray:
    """Kernel-path embeddings g(x) for a batch."""
    X = _as_batch(model, X)
    feats = model.kernel_feature_params if model.kernel_feature_params is not None else model.feature_params
    U = forward_batch(model.feature_spec, feats, X)
    return forward_batch(model.kernel_spec, model.kernel_params, U)


def embed(model: DeepGpModel, x) -> np.ndarray:
    return embed_batch(model, np.asarray(x, dtype=np.float64)[None, :])[0]


def mean_eval_batch(model: DeepGpModel, X) -> np.ndarray:
    X = _as_batch(model, X)
    U = forward_batch(model.feature_spec, model.feature_params, X)
    return forward_batch(model.mean_spec, model.mean_params, U)[:, 0]


def mean_eval(model: DeepGpModel, x) -> float:
    return float(mean_eval_batch(model, np.asarray(x, dtype=np.float64)[None, :])[0])


def _sqdist(Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
    diff = Z1[:, None, :] - Z2[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_matrix(model: DeepGpModel, Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
    s = model.outputscale
    ell2 = np.exp(2.0 * model.log_lengthscale)
    return s * np.exp(-0.5 * _sqdist(Z1, Z2) / ell2)


def kernel_eval(model: DeepGpModel, x1, x2) -> float:
    Z = embed_batch(model, np.stack([np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)]))
    return float(kernel_matrix(model, Z[:1], Z[1:2])[0, 0])


def gram(model: DeepGpModel, X) -> np.ndarray:
    """Noise-free Gram matrix over a batch of inputs."""
    Z = embed_batch(model, X)
    return kernel_matrix(model, Z, Z)


def _chol_with_jitter(K: np.ndarray, scale: float):
    """Cholesky with an escalating diagonal jitter, scaled by outputscale."""
    jitters = [0.0]
    j = JITTER_START
    while j <= JITTER_MAX * (1.0 + 1e-12):
        jitters.append(j)
        j *= 10.0
    last = None
    for jit in jitters:
        try:
            L = np.linalg.cholesky(K + (jit * scale) * np.eye(K.shape[0]) if jit else K)
            return L, jit * scale
        except np.linalg.LinAlgError as exc:
            last = exc
    raise NumericalError(
        f"Gram matrix of size {K.shape[0]} not positive definite after jitter "
        f"{JITTER_MAX * scale:.3e} (outputscale {scale:.3e})"
    ) from last


def _chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    y = solve_triangular(L, B, lower=True)
    return solve_triangular(L.T, y, lower=False)


def posterior_batch(model: DeepGpModel, support_x, support_y, queries):
    """Posterior mean and variance arrays at query inputs.

    Empty support returns the prior: mean_eval(x) and k(x, x) + noise
    variance. Otherwise the exact conditional with per-point residuals
    y_i - m(x_i) against the model mean; the returned variance is the
    latent one, without the observation noise term.
    """
    Q = _as_batch(model, queries)
    support_x = np.asarray(support_x, dtype=np.float64)
    support_y = np.asarray(support_y, dtype=np.float64).reshape(-1)
    if support_x.size == 0:
        support_x = support_x.reshape(0, model.input_dim)
    if support_x.ndim != 2 or support_x.shape[0] != support_y.shape[0]:
        raise ShapeError(f"support shapes {support_x.shape} / {support_y.shape} are inconsistent")
    n = support_x.shape[0]
    s = model.outputscale
    sigma2 = np.exp(2.0 * model.log_noise)

    mu_prior = mean_eval_batch(model, Q)
    if n == 0:
        return mu_prior, np.full(Q.shape[0], s + sigma2)

    Zs = embed_batch(model, support_x)
    Zq = embed_batch(model, Q)
    K = kernel_matrix(model, Zs, Zs) + sigma2 * np.eye(n)
    L, _ = _chol_with_jitter(K, s)
    resid = support_y - mean_eval_batch(model, support_x)
    alpha = _chol_solve(L, resid)
    Kqs = kernel_matrix(model, Zq, Zs)
    mu = mu_prior + Kqs @ alpha
    W = _chol_solve(L, Kqs.T)
    var = s - np.einsum("ij,ji->i", Kqs, W)
    return mu, np.maximum(var, 0.0)


def posterior(model: DeepGpModel, support_x, support_y, queries) -> list:
    mu, var = posterior_batch(model, support_x, support_y, queries)
    return [PosteriorPrediction(float(m), float(v)) for m, v in zip(mu, var)]


@dataclass(frozen=True)
class GpGrads:
    """Gradients of the NLML. Entries are None when that path is frozen."""

    kernel: ParamVector
    feature: ParamVector | None
    mean: ParamVector | None
    log_lengthscale: float
    log_outputscale: float
    log_noise: float


def _nlml_core(model: DeepGpModel, X: np.ndarray, y: np.ndarray, mean_mode: str):
    if mean_mode not in ("model", "zero"):
        raise ValueError(f"mean_mode must be 'model' or 'zero', got {mean_mode!r}")
    X = _as_batch(model, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if n == 0:
        raise ShapeError("nlml needs at least one observation")
    if y.shape[0] != n:
        raise ShapeError(f"targets length {y.shape[0]} does not match batch size {n}")

    feats = model.kernel_feature_params if model.kernel_feature_params is not None else model.feature_params
    U = forward_batch(model.feature_spec, feats, X)
    Z = forward_batch(model.kernel_spec, model.kernel_params, U)
    if mean_mode == "model":
        Um = forward_batch(model.feature_spec, model.feature_params, X)
        m = forward_batch(model.mean_spec, model.mean_params, Um)[:, 0]
        resid = y - m
    else:
        Um = None
        resid = y

    s = model.outputscale
    ell2 = np.exp(2.0 * model.log_lengthscale)
    sigma2 = np.exp(2.0 * model.log_noise)
    D2 = _sqdist(Z, Z)
    K = s * np.exp(-0.5 * D2 / ell2)
    L, _ = _chol_with_jitter(K + sigma2 * np.eye(n), s)
    alpha = _chol_solve(L, resid)
    value = float(np.sum(np.log(np.diag(L))) + 0.5 * resid @ alpha + 0.5 * n * LOG_2PI)
    return X, y, U, Um, Z, resid, s, ell2, sigma2, D2, K, L, alpha, value


def nlml(model: DeepGpModel, X, y, mean_mode: str = "model") -> float:
    """Negative log marginal likelihood of (X, y) under the model.

    mean_mode "model" forms residuals against the model's own mean;
    "zero" treats y as already centered (residual targets).
    """
    return _nlml_core(model, X, y, mean_mode)[-1]


def nlml_grad(
    model: DeepGpModel,
    X,
    y,
    mean_mode: str = "model",
    train_extractor: bool = False,
    train_mean: bool = False,
):
    """NLML value and analytic gradients.

    Gradients always cover the kernel head and the three log
    hyperparameters. train_extractor adds the shared extractor (through
    the kernel path, and through the mean path too when train_mean is
    set); train_mean adds the mean head. Returns (value, GpGrads).
    """
    if train_mean and mean_mode != "model":
        raise ValueError("train_mean requires mean_mode='model'")
    if train_extractor and model.kernel_feature_params is not None:
        raise ValueError("cannot train the extractor while kernel_feature_params overrides it")
    (X, y, U, Um, Z, resid, s, ell2, sigma2, D2, K, L, alpha, value) = _nlml_core(model, X, y, mean_mode)
    n = X.shape[0]

    Kinv = _chol_solve(L, np.eye(n))
    G = 0.5 * (Kinv - np.outer(alpha, alpha))
    GK = G * K
    g_log_os = float(GK.sum())
    g_log_ls = float((GK * D2).sum() / ell2)
    g_log_noise = float(2.0 * sigma2 * np.trace(G))

    # dL/dZ from dK_ij/dz_i = -K_ij (z_i - z_j) / ell^2, using symmetry of G*K
    row = GK.sum(axis=1)
    dZ = -(2.0 / ell2) * (row[:, None] * Z - GK @ Z)
    g_kernel, dU_kernel = vjp(model.kernel_spec, model.kernel_params, U, dZ)

    g_mean = None
    dU_mean = None
    if train_mean:
        g_mean, dU_mean = vjp(model.mean_spec, model.mean_params, Um, (-alpha)[:, None])

    g_feature = None
    if train_extractor:
        upstream = dU_kernel if dU_mean is None else dU_kernel + dU_mean
        g_feature, _ = vjp(model.feature_spec, model.feature_params, X, upstream)

    grads = GpGrads(
        kernel=g_kernel,
        feature=g_feature,
        mean=g_mean,
        log_lengthscale=g_log_ls,
        log_outputscale=g_log_os,
        log_noise=g_log_noise,
    )
    return value, grads


def model_to_bytes(model: DeepGpModel) -> bytes:
    meta = {
        "feature_spec": model.feature_spec.to_dict(),
        "mean_spec": model.mean_spec.to_dict(),
        "kernel_spec": model.kernel_spec.to_dict(),
        "log_lengthscale": model.log_lengthscale,
        "log_outputscale": model.log_outputscale,
        "log_noise": model.log_noise,
        "has_kernel_feature": model.kernel_feature_params is not None,
    }
    blocks = [model.feature_params.values, model.mean_params.values, model.kernel_params.values]
    if model.kernel_feature_params is not None:
        blocks.append(model.kernel_feature_params.values)
    return container_bytes("deepgp", meta, blocks)


def save_model(path: str, model: DeepGpModel) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def model_from_bytes(data: bytes) -> DeepGpModel:
    meta, blocks = parse_container(data, "deepgp")
    feature_spec = NetworkSpec.from_dict(meta["feature_spec"])
    mean_spec = NetworkSpec.from_dict(meta["mean_spec"])
    kernel_spec = NetworkSpec.from_dict(meta["kernel_spec"])
    expected = 4 if meta.get("has_kernel_feature") else 3
    if len(blocks) != expected:
        raise SerializationError(f"model checkpoint holds {len(blocks)} blocks, expected {expected}")
    kf = ParamVector(blocks[3], feature_spec.param_layout()) if expected == 4 else None
    return DeepGpModel(
        feature_spec=feature_spec,
        feature_params=ParamVector(blocks[0], feature_spec.param_layout()),
        mean_spec=mean_spec,
        mean_params=ParamVector(blocks[1], mean_spec.param_layout()),
        kernel_spec=kernel_spec,
        kernel_params=ParamVector(blocks[2], kernel_spec.param_layout()),
        log_lengthscale=float(meta["log_lengthscale"]),
        log_outputscale=float(meta["log_outputscale"]),
        log_noise=float(meta["log_noise"]),
        kernel_feature_params=kf,
    )


def load_model(path: str) -> DeepGpModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def checkpoint_id(model: DeepGpModel) -> str:
    """Short stable identifier of a model's exact contents."""
    return hashlib.sha256(model_to_bytes(model)).hexdigest()[:12]
