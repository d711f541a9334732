"""Run configuration dataclasses and the flat key-value config file format.

Config files hold one `section.key = value` assignment per line; `#`
starts a comment. Keys map onto the dataclass fields below, so every key
and its default is visible in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .nnet import NetworkSpec


def _hidden(*pairs) -> tuple:
    return tuple((int(w), str(a)) for w, a in pairs)


@dataclass(frozen=True)
class ModelConfig:
    """Network shapes for the extractor and the two heads."""

    feature_hidden: tuple = _hidden((32, "relu"))
    feature_dim: int = 16
    mean_hidden: tuple = _hidden((16, "relu"))
    # bounded activations keep the embedding finite far outside the data,
    # so kernel distances stay meaningful on unfamiliar terrain
    kernel_hidden: tuple = _hidden((32, "tanh"), (16, "tanh"))
    embed_dim: int = 8

    def feature_spec(self, input_dim: int) -> NetworkSpec:
        return NetworkSpec(input_dim, self.feature_hidden, self.feature_dim)

    def mean_spec(self) -> NetworkSpec:
        return NetworkSpec(self.feature_dim, self.mean_hidden, 1)

    def kernel_spec(self) -> NetworkSpec:
        return NetworkSpec(self.feature_dim, self.kernel_hidden, self.embed_dim)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for mean and kernel training."""

    lr_mean: float = 5e-3
    lr_kernel: float = 1e-2
    patience: int = 5
    max_epochs_mean: int = 200
    max_epochs_kernel: int = 150
    batch_size: int = 64
    val_fraction: float = 0.1
    folds: int = 4
    noise_floor: float = 1e-3       # lower clamp on the noise std, reward units
    min_group_size: int = 2         # residual groups smaller than this are skipped
    train_kernel_head: bool = True  # set False to fit hyperparameters only
    kernel_extractor_fold: int = -1  # >= 0 pins kernel embeddings to that fold's extractor
    log_every: int = 0              # print a progress line every n epochs (0 = quiet)


@dataclass(frozen=True)
class GenConfig:
    """Synthetic material, terrain and dataset generation settings."""

    n_train_materials: int = 8
    n_ood_materials: int = 4
    rho: float = 0.7                # appearance/latent correlation level
    n_train_tasks: int = 12
    train_records: int = 60
    n_test_tasks: int = 6
    test_records: int = 60
    appearance_dim: int = 3
    grid_cell: float = 0.01         # heightmap resolution, meters
    patch_cells: int = 8            # local observation patch is patch_cells x patch_cells
    patch_extent: float = 0.14      # meters ahead of the scoop start
    noise_frac: float = 0.10        # reward noise: fraction of the noiseless value
    noise_floor_cm3: float = 2.0    # plus this absolute floor


@dataclass(frozen=True)
class BenchConfig:
    """Evaluation protocol settings."""

    shots: tuple = (0, 5, 10)
    mae_trials: int = 30
    deploy_trials: int = 10
    budget: int = 20
    gamma: float = 2.0
    model_seeds: int = 3
    query_fraction: float = 0.8
    top_k: int = 5
    exclude_below: float = 5.0      # drop deployment tasks whose threshold is under this


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


def _parse_hidden(text: str) -> tuple:
    # "32:relu,16:tanh" -> ((32, "relu"), (16, "tanh")); empty string -> no hidden layers
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        if ":" not in part:
            raise ConfigError(f"hidden layer entry {part!r} must look like WIDTH:ACTIVATION")
        w, a = part.split(":", 1)
        out.append((int(w), a.strip()))
    return tuple(out)


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            if ":" in raw:
                return _parse_hidden(raw)
            return tuple(int(p) for p in raw.split(",") if p.strip() != "")
        return raw
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from exc


def parse_config_text(text: str) -> dict:
    """Flat `section.key = value` lines to a {key: raw string} dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno} has no '=': {line.rstrip()!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "gen": GenConfig, "bench": BenchConfig}


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    sections = {name: getattr(cfg, name) for name in _SECTIONS}
    for key, raw in overrides.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} must look like section.field")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        cls = _SECTIONS[section]
        by_name = {f.name: f for f in fields(cls)}
        if name not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(sections[section], name)
        kind = type(current) if current is not None else str
        sections[section] = replace(sections[section], **{name: _parse_value(raw, kind, key)})
    return RunConfig(**sections)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        overrides = parse_config_text(fh.read())
    return apply_overrides(base if base is not None else RunConfig(), overrides)
