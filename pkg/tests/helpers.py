"""Hand-built networks, models and datasets shared across test modules."""

from __future__ import annotations

import numpy as np

from scoopgp.gp import DeepGpModel, embed_batch, kernel_matrix, mean_eval_batch
from scoopgp.nnet import NetworkSpec, ParamVector, init_params, params_from_layers
from scoopgp.tasks import DEPTH_MIN, ScoopAction, ScoopRecord, TaskDataset, TerrainTask


def identity_params(spec: NetworkSpec) -> ParamVector:
    """Parameters making an affine stack compute the identity map.

    Only valid when every layer's activation is identity on the
    rectangular-eye image (identity or square widths with tanh excluded)."""
    dims = spec.layer_dims()
    layers = []
    for i in range(len(dims) - 1):
        layers.append((np.eye(dims[i + 1], dims[i]), np.zeros(dims[i + 1])))
    return params_from_layers(spec, layers)


def random_model(
    input_dim: int,
    seed,
    feature=((6, "tanh"),),
    feature_dim: int = 5,
    mean=((4, "tanh"),),
    kernel=((5, "tanh"),),
    embed_dim: int = 3,
    log_lengthscale: float = 0.0,
    log_outputscale: float = 0.0,
    log_noise: float = float(np.log(0.3)),
) -> DeepGpModel:
    """Small random deep GP with controllable hyperparameters."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fspec = NetworkSpec(input_dim, feature, feature_dim)
    mspec = NetworkSpec(feature_dim, mean, 1)
    kspec = NetworkSpec(feature_dim, kernel, embed_dim)
    return DeepGpModel(
        feature_spec=fspec,
        feature_params=init_params(fspec, rng),
        mean_spec=mspec,
        mean_params=init_params(mspec, rng),
        kernel_spec=kspec,
        kernel_params=init_params(kspec, rng),
        log_lengthscale=log_lengthscale,
        log_outputscale=log_outputscale,
        log_noise=log_noise,
    )


def identity_embedding_model(
    dim: int,
    log_lengthscale: float = 0.0,
    log_outputscale: float = 0.0,
    log_noise: float = float(np.log(0.1)),
    mean_bias: float = 0.0,
) -> DeepGpModel:
    """embed(x) = x and mean(x) = mean_bias, for closed-form kernel checks."""
    fspec = NetworkSpec(dim, (), dim)
    mspec = NetworkSpec(dim, (), 1)
    kspec = NetworkSpec(dim, (), dim)
    mean = params_from_layers(mspec, [(np.zeros((1, dim)), np.array([float(mean_bias)]))])
    return DeepGpModel(
        feature_spec=fspec,
        feature_params=identity_params(fspec),
        mean_spec=mspec,
        mean_params=mean,
        kernel_spec=kspec,
        kernel_params=identity_params(kspec),
        log_lengthscale=log_lengthscale,
        log_outputscale=log_outputscale,
        log_noise=log_noise,
    )


def dense_posterior_oracle(model: DeepGpModel, Xs, ys, Xq):
    """Literal dense-inverse posterior: m(x) + k_*(K+sigma^2 I)^-1 (y - m(X)),
    k(x,x) - k_* (K+sigma^2 I)^-1 k_*^T. The reference the Cholesky path
    must reproduce."""
    Xs = np.asarray(Xs, dtype=np.float64)
    Xq = np.asarray(Xq, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    Zs = embed_batch(model, Xs)
    Zq = embed_batch(model, Xq)
    sigma2 = np.exp(2.0 * model.log_noise)
    K = kernel_matrix(model, Zs, Zs) + sigma2 * np.eye(Xs.shape[0])
    Kinv = np.linalg.inv(K)
    Kqs = kernel_matrix(model, Zq, Zs)
    resid = ys - mean_eval_batch(model, Xs)
    mu = mean_eval_batch(model, Xq) + Kqs @ Kinv @ resid
    var = model.outputscale - np.einsum("ij,jk,ik->i", Kqs, Kinv, Kqs)
    return mu, np.maximum(var, 0.0)


_TOY_ACTION = ScoopAction(0.1, 0.1, 0, DEPTH_MIN, "soft")


def toy_dataset(task_id: str, feats, rewards, composition: str = "single",
                materials=("matA",)) -> TaskDataset:
    """Dataset with hand-chosen features and rewards. Every record shares one
    action, so gp_inputs() is the features plus a constant (0, 0) tail."""
    feats = np.asarray(feats, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    records = tuple(
        ScoopRecord(_TOY_ACTION, float(r), feats[i]) for i, r in enumerate(rewards)
    )
    return TaskDataset(task_id, composition, tuple(materials), records)


def flat_task(material, task_id: str = "flat0", cell: float = 0.01) -> TerrainTask:
    """Perfectly flat single-material tray."""
    H, W = int(round(0.6 / cell)), int(round(0.9 / cell))
    return TerrainTask(
        id=task_id,
        composition="single",
        materials=(material,),
        heightmap=np.zeros((H, W)),
        region_map=np.zeros((H, W), dtype=np.int64),
        cell=cell,
    )
