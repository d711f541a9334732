"""Meta-training for the deep mean and deep kernel.

Two trainers produce deployment-ready models:

train_codega
    Controlled-deployment-gap training. Materials are split into K folds;
    each fold's mean is trained only on tasks that avoid the fold's
    materials, so the residuals collected on the held-out tasks look like
    genuine deployment errors. A shared kernel is then trained on those
    residual groups (one task per batch, fold extractor loaded frozen),
    and the final mean is retrained from scratch on everything.

train_dkmt
    The joint baseline: mean, kernel and shared extractor trained
    together by marginal likelihood, one task per batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import ConfigError
from .gp import DeepGpModel, nlml_grad
from .nnet import (
    NetworkSpec,
    ParamVector,
    forward_batch,
    init_params,
    optimizer_step,
    split_params,
    vjp,
)

LOG_LS_MIN, LOG_LS_MAX = math.log(1e-3), math.log(1e4)
LOG_OS_MIN, LOG_OS_MAX = math.log(1e-8), math.log(1e8)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass(frozen=True)
class TrainingReport:
    label: str
    entries: tuple
    best_epoch: int

    def to_text(self) -> str:
        lines = [f"# training report: {self.label}", "# epoch train_loss val_loss", f"# best_epoch {self.best_epoch}"]
        for e in self.entries:
            lines.append(f"{e.epoch} {e.train_loss:.9g} {e.val_loss:.9g}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MeanResult:
    feature_params: ParamVector
    mean_params: ParamVector
    report: TrainingReport


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    materials: frozenset
    kernel_task_ids: tuple
    mean_task_ids: tuple


@dataclass(frozen=True)
class FoldCheckpoint:
    fold_index: int
    feature_params: ParamVector
    mean_params: ParamVector
    report: TrainingReport


@dataclass(frozen=True)
class ResidualGroup:
    task_id: str
    fold_index: int
    inputs: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True)
class ResidualDataset:
    groups: tuple

    def pooled_residuals(self) -> np.ndarray:
        return np.concatenate([g.residuals for g in self.groups])


@dataclass(frozen=True)
class KernelResult:
    kernel_params: ParamVector
    log_lengthscale: float
    log_outputscale: float
    log_noise: float
    report: TrainingReport


@dataclass(frozen=True)
class CodegaResult:
    model: DeepGpModel
    splits: tuple
    fold_checkpoints: dict
    kernel_report: TrainingReport
    mean_report: TrainingReport


@dataclass(frozen=True)
class DkmtResult:
    model: DeepGpModel
    report: TrainingReport


def _pool_training_data(datasets) -> tuple:
    xs = [ds.gp_inputs() for ds in datasets if len(ds)]
    ys = [ds.rewards() for ds in datasets if len(ds)]
    if not xs:
        raise ValueError("no records to train on")
    return np.concatenate(xs, axis=0), np.concatenate(ys)


def _mean_predict(feature_spec, feature_params, mean_spec, mean_params, X) -> np.ndarray:
    U = forward_batch(feature_spec, feature_params, X)
    return forward_batch(mean_spec, mean_params, U)[:, 0]


def _scale_output_layer(spec: NetworkSpec, params: ParamVector, mu: float, sigma: float) -> ParamVector:
    """Fold a target standardization y = sigma * y_std + mu into the affine
    output layer, so the returned parameters predict in raw units."""
    layers = [(W.copy(), b.copy()) for W, b in split_params(spec, params)]
    W, b = layers[-1]
    layers[-1] = (sigma * W, sigma * b + mu)
    from .nnet import params_from_layers

    return params_from_layers(spec, layers)


def _standardizer(y: np.ndarray) -> tuple:
    mu = float(y.mean())
    sigma = float(y.std())
    if sigma < 1e-12:
        sigma = 1.0
    return mu, sigma


def train_mean(datasets, seed, model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig(), label: str = "mean") -> MeanResult:
    """Supervised MSE training of extractor plus mean head.

    Holds out a validation fraction, stops early on validation loss with
    the configured patience, and restores the best epoch's parameters.
    Reported losses are in raw reward units.
    """
    X, y = _pool_training_data(datasets)
    n = X.shape[0]
    if n < 2:
        raise ValueError("mean training needs at least two records")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x3EA0])
    init_ss, split_ss, batch_ss = ss.spawn(3)
    rng_split = np.random.default_rng(split_ss)
    rng_batch = np.random.default_rng(batch_ss)

    mu, sigma = _standardizer(y)
    y_std = (y - mu) / sigma

    perm = rng_split.permutation(n)
    n_val = max(1, int(round(train_cfg.val_fraction * n)))
    n_val = min(n_val, n - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    Xt, yt = X[train_idx], y_std[train_idx]
    Xv, yv = X[val_idx], y_std[val_idx]

    feature_spec = model_cfg.feature_spec(X.shape[1])
    mean_spec = model_cfg.mean_spec()
    rng_init = np.random.default_rng(init_ss)
    feat = init_params(feature_spec, rng_init)
    mean = init_params(mean_spec, rng_init)
    feat_state = None
    mean_state = None

    def mse(params_feat, params_mean, Xs, ys) -> float:
        pred = _mean_predict(feature_spec, params_feat, mean_spec, params_mean, Xs)
        return float(np.mean((pred - ys) ** 2))

    best = (math.inf, feat, mean, 0)
    bad = 0
    entries = []
    raw = sigma * sigma
    for epoch in range(1, train_cfg.max_epochs_mean + 1):
        order = rng_batch.permutation(Xt.shape[0])
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            Xb, yb = Xt[idx], yt[idx]
            U = forward_batch(feature_spec, feat, Xb)
            pred = forward_batch(mean_spec, mean, U)[:, 0]
            upstream = (2.0 / len(idx)) * (pred - yb)[:, None]
            g_mean, dU = vjp(mean_spec, mean, U, upstream)
            g_feat, _ = vjp(feature_spec, feat, Xb, dU)
            mean, mean_state = optimizer_step(mean, g_mean, mean_state, train_cfg.lr_mean)
            feat, feat_state = optimizer_step(feat, g_feat, feat_state, train_cfg.lr_mean)
        train_loss = mse(feat, mean, Xt, yt)
        val_loss = mse(feat, mean, Xv, yv)
        entries.append(EpochRecord(epoch, raw * train_loss, raw * val_loss))
        if train_cfg.log_every and epoch % train_cfg.log_every == 0:
            print(f"[{label}] Epoch {epoch} | train_loss {raw * train_loss:.4f} | val_loss {raw * val_loss:.4f}")
        if val_loss < best[0]:
            best = (val_loss, feat, mean, epoch)
            bad = 0
        else:
            bad += 1
            if bad > train_cfg.patience:
                break

    _, feat, mean, best_epoch = best
    mean = _scale_output_layer(mean_spec, mean, mu, sigma)
    report = TrainingReport(label=label, entries=tuple(entries), best_epoch=best_epoch)
    return MeanResult(feature_params=feat, mean_params=mean, report=report)


def make_fold_splits(datasets, folds: int, seed) -> list:
    """Partition materials into near-equal folds.

    Fold k's kernel set holds every task that touches a fold-k material;
    its mean set is the complement. Every task lands in at least one
    fold's kernel set.
    """
    materials = sorted({m for ds in datasets for m in ds.material_ids})
    if folds < 2:
        raise ValueError("need at least two folds")
    if folds > len(materials):
        raise ValueError(f"cannot split {len(materials)} materials into {folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xF01D]))
    order = list(rng.permutation(materials))
    buckets = [set() for _ in range(folds)]
    for i, mat in enumerate(order):
        buckets[i % folds].add(str(mat))
    splits = []
    for k, bucket in enumerate(buckets):
        kernel_ids = tuple(ds.task_id for ds in datasets if set(ds.material_ids) & bucket)
        mean_ids = tuple(ds.task_id for ds in datasets if not set(ds.material_ids) & bucket)
        splits.append(FoldSplit(k, frozenset(bucket), kernel_ids, mean_ids))
    return splits


def build_residual_dataset(splits, datasets, seed, model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig()):
    """Train one mean per fold and collect held-out residuals.

    Returns (ResidualDataset, fold checkpoints); each group's residuals
    are r - m_fold(x) for one task, tagged with the fold that produced
    them so they stay reproducible from the stored checkpoint.
    """
    by_id = {ds.task_id: ds for ds in datasets}
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x2E51D])
    # one seed for every fold: shared initialization keeps the fold feature
    # spaces aligned, so the kernel head trained against them transfers
    fold_seed = int(ss.generate_state(1)[0])
    groups = []
    checkpoints = {}
    for split in splits:
        if not split.mean_task_ids:
            raise ConfigError(
                f"fold {split.fold_index} has no mean-training tasks: every task touches its materials; "
                f"lower the fold count or diversify the task family"
            )
        result = train_mean(
            [by_id[t] for t in split.mean_task_ids],
            fold_seed,
            model_cfg,
            train_cfg,
            label=f"fold{split.fold_index}-mean",
        )
        feature_spec = model_cfg.feature_spec(by_id[split.mean_task_ids[0]].feature_dim + 2)
        mean_spec = model_cfg.mean_spec()
        checkpoints[split.fold_index] = FoldCheckpoint(
            fold_index=split.fold_index,
            feature_params=result.feature_params,
            mean_params=result.mean_params,
            report=result.report,
        )
        for task_id in split.kernel_task_ids:
            ds = by_id[task_id]
            if not len(ds):
                continue
            X = ds.gp_inputs()
            resid = ds.rewards() - _mean_predict(feature_spec, result.feature_params, mean_spec, result.mean_params, X)
            groups.append(ResidualGroup(task_id=task_id, fold_index=split.fold_index, inputs=X, residuals=resid))
    return ResidualDataset(groups=tuple(groups)), checkpoints


def _median_embed_heuristic(embeddings: np.ndarray) -> float:
    n = embeddings.shape[0]
    if n > 256:
        embeddings = embeddings[:256]
        n = 256
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    vals = d[np.triu_indices(n, k=1)]
    med = float(np.median(vals)) if vals.size else 0.0
    return med if med > 1e-6 else 1.0


def _clamp_hypers(h: ParamVector, log_noise_min: float) -> ParamVector:
    vals = h.values.copy()
    vals[0] = np.clip(vals[0], LOG_LS_MIN, LOG_LS_MAX)
    vals[1] = np.clip(vals[1], LOG_OS_MIN, LOG_OS_MAX)
    vals[2] = max(vals[2], log_noise_min)
    return h.replace_values(vals)


_HYPER_LAYOUT = (("hyper", (3,)),)


def train_kernel_codega(residuals: ResidualDataset, fold_checkpoints: dict, seed, model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig()) -> KernelResult:
    """Shared kernel over residual groups, one task per batch.

    Each batch loads its fold's extractor frozen; only the kernel head and
    the log hyperparameters receive gradients. Stops early on the
    aggregate training NLML. Groups below min_group_size are skipped.
    """
    groups = []
    for g in residuals.groups:
        if len(g.residuals) < train_cfg.min_group_size:
            print(f"[kernel] skipping task {g.task_id}: {len(g.residuals)} residuals "
                  f"< min_group_size {train_cfg.min_group_size}")
            continue
        groups.append(g)
    if not groups:
        raise ValueError("no residual group meets min_group_size")

    input_dim = groups[0].inputs.shape[1]
    feature_spec = model_cfg.feature_spec(input_dim)
    mean_spec = model_cfg.mean_spec()
    kernel_spec = model_cfg.kernel_spec()
    mean_zero = ParamVector(np.zeros(mean_spec.param_count()), mean_spec.param_layout())

    pooled = np.concatenate([g.residuals for g in groups])
    sigma_sc = float(pooled.std())
    if sigma_sc < 1e-12:
        sigma_sc = 1.0
    scaled = {g.task_id: g.residuals / sigma_sc for g in groups}
    log_noise_min = math.log(train_cfg.noise_floor) - math.log(sigma_sc)

    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x6E51])
    init_ss, batch_ss = ss.spawn(2)
    kernel = init_params(kernel_spec, np.random.default_rng(init_ss))
    rng = np.random.default_rng(batch_ss)

    # initial hyperparameters: unit variance after scaling, median embedding
    # distance for the lengthscale, half a residual std of noise
    sample = np.concatenate([g.inputs[:64] for g in groups])[:256]
    sample_feats = []
    for g in groups:
        ck = fold_checkpoints[g.fold_index]
        U = forward_batch(feature_spec, ck.feature_params, g.inputs[:64])
        sample_feats.append(forward_batch(kernel_spec, kernel, U))
    med = _median_embed_heuristic(np.concatenate(sample_feats)[:256])
    var0 = float(np.var(pooled / sigma_sc))
    hyper = ParamVector(np.array([math.log(med), math.log(max(var0, 1e-4)), math.log(0.5)]), _HYPER_LAYOUT)
    hyper = _clamp_hypers(hyper, log_noise_min)

    def epoch_model(g: ResidualGroup, kern: ParamVector, hyp: ParamVector) -> DeepGpModel:
        ck = fold_checkpoints[g.fold_index]
        return DeepGpModel(
            feature_spec=feature_spec,
            feature_params=ck.feature_params,
            mean_spec=mean_spec,
            mean_params=mean_zero,
            kernel_spec=kernel_spec,
            kernel_params=kern,
            log_lengthscale=float(hyp.values[0]),
            log_outputscale=float(hyp.values[1]),
            log_noise=float(hyp.values[2]),
        )

    kernel_state = None
    hyper_state = None
    n_total = sum(len(g.residuals) for g in groups)
    raw_shift = n_total * math.log(sigma_sc)
    best = (math.inf, kernel, hyper, 0)
    bad = 0
    entries = []
    for epoch in range(1, train_cfg.max_epochs_kernel + 1):
        total = 0.0
        for gi in rng.permutation(len(groups)):
            g = groups[gi]
            model = epoch_model(g, kernel, hyper)
            value, grads = nlml_grad(model, g.inputs, scaled[g.task_id], mean_mode="zero")
            total += value
            if train_cfg.train_kernel_head:
                kernel, kernel_state = optimizer_step(kernel, grads.kernel, kernel_state, train_cfg.lr_kernel)
            hgrad = ParamVector(
                np.array([grads.log_lengthscale, grads.log_outputscale, grads.log_noise]), _HYPER_LAYOUT
            )
            hyper, hyper_state = optimizer_step(hyper, hgrad, hyper_state, train_cfg.lr_kernel)
            hyper = _clamp_hypers(hyper, log_noise_min)
        entries.append(EpochRecord(epoch, total + raw_shift, float("nan")))
        if train_cfg.log_every and epoch % train_cfg.log_every == 0:
            print(f"[kernel] Epoch {epoch} | train_loss {total + raw_shift:.4f}")
        if total < best[0]:
            best = (total, kernel, hyper, epoch)
            bad = 0
        else:
            bad += 1
            if bad > train_cfg.patience:
                break

    _, kernel, hyper, best_epoch = best
    log_ls = float(hyper.values[0])
    log_os = float(hyper.values[1]) + 2.0 * math.log(sigma_sc)
    log_noise = max(float(hyper.values[2]) + math.log(sigma_sc), math.log(train_cfg.noise_floor))
    report = TrainingReport(label="kernel", entries=tuple(entries), best_epoch=best_epoch)
    return KernelResult(kernel_params=kernel, log_lengthscale=log_ls, log_outputscale=log_os, log_noise=log_noise, report=report)


def train_codega(datasets, folds: int | None = None, seed=0, model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig()) -> CodegaResult:
    """The full controlled-gap pipeline.

    Fold split, per-fold means, residual collection, kernel training on
    the residual groups, then a fresh mean on all data. The deployed
    model pairs the final mean and extractor with the residual-trained
    kernel head; the kernel path can be pinned to a fold extractor via
    train_cfg.kernel_extractor_fold.
    """
    folds = train_cfg.folds if folds is None else folds
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xC0DE6A])
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(4)]
    splits = make_fold_splits(datasets, folds, seeds[0])
    residuals, checkpoints = build_residual_dataset(splits, datasets, seeds[1], model_cfg, train_cfg)
    kernel = train_kernel_codega(residuals, checkpoints, seeds[2], model_cfg, train_cfg)
    # the final mean re-uses the fold-mean seed so its extractor starts from
    # the same initialization the kernel head was trained against
    mean_seed = int(np.random.SeedSequence([seeds[1] & 0xFFFFFFFF, 0x2E51D]).generate_state(1)[0])
    final = train_mean(datasets, mean_seed, model_cfg, train_cfg, label="final-mean")

    input_dim = datasets[0].feature_dim + 2
    kernel_feature = None
    if train_cfg.kernel_extractor_fold >= 0:
        if train_cfg.kernel_extractor_fold not in checkpoints:
            raise ConfigError(f"kernel_extractor_fold {train_cfg.kernel_extractor_fold} is not a fold index")
        kernel_feature = checkpoints[train_cfg.kernel_extractor_fold].feature_params
    model = DeepGpModel(
        feature_spec=model_cfg.feature_spec(input_dim),
        feature_params=final.feature_params,
        mean_spec=model_cfg.mean_spec(),
        mean_params=final.mean_params,
        kernel_spec=model_cfg.kernel_spec(),
        kernel_params=kernel.kernel_params,
        log_lengthscale=kernel.log_lengthscale,
        log_outputscale=kernel.log_outputscale,
        log_noise=kernel.log_noise,
        kernel_feature_params=kernel_feature,
    )
    return CodegaResult(
        model=model,
        splits=tuple(splits),
        fold_checkpoints=checkpoints,
        kernel_report=kernel.report,
        mean_report=final.report,
    )


def train_dkmt(datasets, seed=0, model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig()) -> DkmtResult:
    """Joint NLML training of mean, kernel and shared extractor.

    One task per batch, kernel-training optimizer settings, early stopping
    on the aggregate training NLML.
    """
    live = [ds for ds in datasets if len(ds) >= train_cfg.min_group_size]
    if not live:
        raise ValueError("no dataset meets min_group_size")
    X_all, y_all = _pool_training_data(live)
    mu, sigma = _standardizer(y_all)
    log_noise_min = math.log(train_cfg.noise_floor) - math.log(sigma)

    input_dim = X_all.shape[1]
    feature_spec = model_cfg.feature_spec(input_dim)
    mean_spec = model_cfg.mean_spec()
    kernel_spec = model_cfg.kernel_spec()

    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xD6A7])
    init_ss, batch_ss = ss.spawn(2)
    rng_init = np.random.default_rng(init_ss)
    feat = init_params(feature_spec, rng_init)
    mean = init_params(mean_spec, rng_init)
    kernel = init_params(kernel_spec, rng_init)
    rng = np.random.default_rng(batch_ss)

    U0 = forward_batch(feature_spec, feat, X_all[:256])
    med = _median_embed_heuristic(forward_batch(kernel_spec, kernel, U0))
    hyper = ParamVector(np.array([math.log(med), 0.0, math.log(0.5)]), _HYPER_LAYOUT)
    hyper = _clamp_hypers(hyper, log_noise_min)

    states = {"feat": None, "mean": None, "kernel": None, "hyper": None}
    data = [(ds.gp_inputs(), (ds.rewards() - mu) / sigma) for ds in live]
    n_total = sum(len(y) for _, y in data)
    raw_shift = n_total * math.log(sigma)
    best = (math.inf, feat, mean, kernel, hyper, 0)
    bad = 0
    entries = []
    for epoch in range(1, train_cfg.max_epochs_kernel + 1):
        total = 0.0
        for ti in rng.permutation(len(data)):
            Xb, yb = data[ti]
            model = DeepGpModel(
                feature_spec=feature_spec,
                feature_params=feat,
                mean_spec=mean_spec,
                mean_params=mean,
                kernel_spec=kernel_spec,
                kernel_params=kernel,
                log_lengthscale=float(hyper.values[0]),
                log_outputscale=float(hyper.values[1]),
                log_noise=float(hyper.values[2]),
            )
            value, grads = nlml_grad(model, Xb, yb, mean_mode="model", train_extractor=True, train_mean=True)
            total += value
            feat, states["feat"] = optimizer_step(feat, grads.feature, states["feat"], train_cfg.lr_kernel)
            mean, states["mean"] = optimizer_step(mean, grads.mean, states["mean"], train_cfg.lr_kernel)
            kernel, states["kernel"] = optimizer_step(kernel, grads.kernel, states["kernel"], train_cfg.lr_kernel)
            hgrad = ParamVector(
                np.array([grads.log_lengthscale, grads.log_outputscale, grads.log_noise]), _HYPER_LAYOUT
            )
            hyper, states["hyper"] = optimizer_step(hyper, hgrad, states["hyper"], train_cfg.lr_kernel)
            hyper = _clamp_hypers(hyper, log_noise_min)
        entries.append(EpochRecord(epoch, total + raw_shift, float("nan")))
        if train_cfg.log_every and epoch % train_cfg.log_every == 0:
            print(f"[joint] Epoch {epoch} | train_loss {total + raw_shift:.4f}")
        if total < best[0]:
            best = (total, feat, mean, kernel, hyper, epoch)
            bad = 0
        else:
            bad += 1
            if bad > train_cfg.patience:
                break

    _, feat, mean, kernel, hyper, best_epoch = best
    mean = _scale_output_layer(mean_spec, mean, mu, sigma)
    model = DeepGpModel(
        feature_spec=feature_spec,
        feature_params=feat,
        mean_spec=mean_spec,
        mean_params=mean,
        kernel_spec=kernel_spec,
        kernel_params=kernel,
        log_lengthscale=float(hyper.values[0]),
        log_outputscale=float(hyper.values[1]) + 2.0 * math.log(sigma),
        log_noise=max(float(hyper.values[2]) + math.log(sigma), math.log(train_cfg.noise_floor)),
    )
    report = TrainingReport(label="joint", entries=tuple(entries), best_epoch=best_epoch)
    return DkmtResult(model=model, report=report)
