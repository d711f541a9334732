"""Synthetic scooping world: materials, terrains, rewards and datasets.

A material is a point in a 4-d latent property space (scoopability gain,
jamming propensity, depth sensitivity, slope-direction preference) plus an
appearance vector whose correlation with the latent properties is
controlled by rho. Terrains compose one to three materials over a
0.9 m x 0.6 m tray under four layouts; rewards come from a noisy oracle
over scooped volume in cm^3. Datasets round-trip through a canonical
plain-text format: one record per line plus a separate task manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .config import GenConfig
from .errors import IngestError
from .serialize import read_container, write_container

TRAY_W = 0.9            # meters, x extent
TRAY_H = 0.6            # meters, y extent
DEPTH_MIN = 0.03
DEPTH_MAX = 0.08
N_YAWS = 8              # 45 degrees apart
DRAG_LEN = 0.06         # scoop drag length, meters
SCOOP_W = 0.08          # scoop width, meters
MAX_ELEVATION = 0.2     # meters
MAX_SLOPE = float(np.tan(np.deg2rad(30.0)))
HIDDEN_DEPTH = 0.05     # below this depth a hidden layer governs the reward

COMPOSITIONS = ("single", "mixture", "partition", "layers")
STIFFNESS_LEVELS = ("soft", "hard")

# Reward shaping constants (cm^3 scale calibrated against the desk-size tray)
FILL_BASE = 0.10
FILL_DEPTH = 0.60
# fill response saturates for extreme depth sensitivity (overfilled scoops
# shed material); the knee sits past the band sampled for training materials
FILL_KNEE = 1.10
FILL_KNEE_WIDTH = 0.08
SLOPE_GAIN = 0.5
SLOPE_REF = 0.15
JAM_BASE = 0.35
JAM_DEPTH = 0.65
JAM_SLOPE_REF = 0.08
JAM_HARD_RELIEF = 0.35
# interlock regime: grains lock up once jamming propensity crosses the knee,
# killing deep scoops regardless of scoop stiffness
JAM_LOCK_KNEE = 0.78
JAM_LOCK_WIDTH = 0.04
JAM_LOCK_BASE = 0.15
JAM_LOCK_DEPTH = 0.85
GATE_MIN = 0.05

LATENT_DIM = 4
LATENT_NAMES = ("scoop_gain", "jam", "depth_sens", "slope_pref")
# reference boxes used both for sampling training materials and for
# standardizing latents before mixing them into appearances
TRAIN_LATENT_LO = np.array([0.25, 0.05, 0.10, -0.80])
TRAIN_LATENT_HI = np.array([0.95, 0.70, 0.90, 0.80])
LATENT_PHYS_LO = np.array([0.0, 0.0, 0.0, -1.0])
LATENT_PHYS_HI = np.array([1.4, 1.0, 1.5, 1.0])


@dataclass(frozen=True)
class Material:
    id: str
    latent: np.ndarray      # (LATENT_DIM,) hidden physical properties
    appearance: np.ndarray  # visible pseudo-color, arbitrary units

    def __post_init__(self):
        lat = np.asarray(self.latent, dtype=np.float64)
        app = np.asarray(self.appearance, dtype=np.float64)
        if lat.shape != (LATENT_DIM,):
            raise ValueError(f"latent must have shape ({LATENT_DIM},), got {lat.shape}")
        lat.flags.writeable = False
        app.flags.writeable = False
        object.__setattr__(self, "latent", lat)
        object.__setattr__(self, "appearance", app)

    @property
    def scoop_gain(self) -> float:
        return float(self.latent[0])

    @property
    def jam(self) -> float:
        return float(self.latent[1])

    @property
    def depth_sens(self) -> float:
        return float(self.latent[2])

    @property
    def slope_pref(self) -> float:
        return float(self.latent[3])


@dataclass(frozen=True)
class MaterialPool:
    """Training materials plus an out-of-distribution pool whose latents sit
    outside the training pool's convex hull in at least one coordinate."""

    training: tuple
    ood: tuple

    @property
    def all(self) -> tuple:
        return self.training + self.ood

    def by_id(self, material_id: str) -> Material:
        for m in self.all:
            if m.id == material_id:
                return m
        raise KeyError(material_id)


def generate_materials(n_train: int, n_ood: int, rho: float, seed, appearance_dim: int = 3) -> MaterialPool:
    """Sample a material pool.

    Appearances mix an affine image of the standardized latent with
    independent noise at correlation level rho: rho=1 makes appearance an
    exact affine function of the latent, rho=0 makes it independent. Each
    OOD material has at least one latent coordinate pushed strictly past
    the training pool's range, which puts it outside the training hull.
    """
    if n_train < 1:
        raise ValueError("need at least one training material")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    mixing = rng.normal(size=(appearance_dim, LATENT_DIM))
    mixing /= np.linalg.norm(mixing, axis=1, keepdims=True)

    def appearance_of(latent: np.ndarray) -> np.ndarray:
        std = 2.0 * (latent - TRAIN_LATENT_LO) / (TRAIN_LATENT_HI - TRAIN_LATENT_LO) - 1.0
        signal = mixing @ std
        noise = rng.normal(size=appearance_dim)
        return 0.5 + 0.25 * (rho * signal + np.sqrt(1.0 - rho * rho) * noise)

    train_latents = rng.uniform(TRAIN_LATENT_LO, TRAIN_LATENT_HI, size=(n_train, LATENT_DIM))
    training = tuple(
        Material(f"mat{i:02d}", train_latents[i], appearance_of(train_latents[i]))
        for i in range(n_train)
    )

    lo = train_latents.min(axis=0)
    hi = train_latents.max(axis=0)
    # push order: gain low (a barely scoopable analog), jam high, depth
    # sensitivity high, gain high (free-flowing fines that pack far beyond
    # anything in the training stock)
    pushes = [(0, -1), (1, +1), (2, +1), (0, +1)]
    ood = []
    for i in range(n_ood):
        coord, sign = pushes[i % len(pushes)]
        latent = rng.uniform(TRAIN_LATENT_LO, TRAIN_LATENT_HI)
        if coord == 1:
            # a jamming-novelty material stays scoopable in shallow strokes,
            # so the surprise is the interlock, not a dead tray
            latent[0] = rng.uniform(0.55, 0.90)
        margin = rng.uniform(0.25, 0.45) * (TRAIN_LATENT_HI[coord] - TRAIN_LATENT_LO[coord])
        if sign > 0:
            value = min(hi[coord] + margin, LATENT_PHYS_HI[coord])
            if value <= hi[coord]:
                value = 0.5 * (hi[coord] + LATENT_PHYS_HI[coord])
        else:
            value = max(lo[coord] - margin, LATENT_PHYS_LO[coord])
            if value >= lo[coord]:
                value = 0.5 * (lo[coord] + LATENT_PHYS_LO[coord])
        latent[coord] = value
        # the pushed coordinate leaves no visual trace: the appearance is
        # rendered from a disguise latent whose novel coordinate is redrawn
        # inside the training band, so the material looks unremarkable. The
        # over-packing fines look like the best stock on the bench; they
        # still outperform that look.
        shown = latent.copy()
        if coord == 0 and sign > 0:
            shown[coord] = rng.uniform(lo[coord] + 0.7 * (hi[coord] - lo[coord]), hi[coord])
        else:
            shown[coord] = rng.uniform(lo[coord], hi[coord])
        ood.append(Material(f"ood{i:02d}", latent, appearance_of(shown)))
    return MaterialPool(training=training, ood=tuple(ood))


@dataclass
class TerrainTask:
    """One tray-scale terrain. heightmap is meters on a square cell grid,
    region_map indexes into materials per cell, hidden_map (layers only)
    gives the material below HIDDEN_DEPTH."""

    id: str
    composition: str
    materials: tuple
    heightmap: np.ndarray
    region_map: np.ndarray
    hidden_map: np.ndarray | None = None
    cell: float = 0.01

    def __post_init__(self):
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"unknown composition {self.composition!r}")
        if self.heightmap.shape != self.region_map.shape:
            raise ValueError("heightmap and region_map shapes differ")
        if self.hidden_map is not None and self.hidden_map.shape != self.region_map.shape:
            raise ValueError("hidden_map shape differs from region_map")

    @property
    def material_ids(self) -> tuple:
        return tuple(m.id for m in self.materials)

    def copy(self) -> "TerrainTask":
        return TerrainTask(
            id=self.id,
            composition=self.composition,
            materials=self.materials,
            heightmap=self.heightmap.copy(),
            region_map=self.region_map.copy(),
            hidden_map=None if self.hidden_map is None else self.hidden_map.copy(),
            cell=self.cell,
        )


@dataclass(frozen=True)
class ScoopAction:
    x: float
    y: float
    yaw_index: int
    depth: float
    stiffness: str

    def __post_init__(self):
        if not (0.0 <= self.x <= TRAY_W and 0.0 <= self.y <= TRAY_H):
            raise ValueError(f"scoop start ({self.x}, {self.y}) outside the tray")
        if not 0 <= int(self.yaw_index) < N_YAWS:
            raise ValueError(f"yaw_index must be in [0, {N_YAWS}), got {self.yaw_index}")
        if not (DEPTH_MIN - 1e-9 <= self.depth <= DEPTH_MAX + 1e-9):
            raise ValueError(f"depth {self.depth} outside [{DEPTH_MIN}, {DEPTH_MAX}]")
        if self.stiffness not in STIFFNESS_LEVELS:
            raise ValueError(f"stiffness must be one of {STIFFNESS_LEVELS}, got {self.stiffness!r}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw_index", int(self.yaw_index))
        object.__setattr__(self, "depth", float(self.depth))

    @property
    def yaw(self) -> float:
        return self.yaw_index * (2.0 * np.pi / N_YAWS)

    @property
    def stiffness_bit(self) -> float:
        return 1.0 if self.stiffness == "hard" else 0.0


def action_feasible(action: ScoopAction) -> bool:
    """The full drag segment must stay inside the tray."""
    ex = action.x + np.cos(action.yaw) * DRAG_LEN
    ey = action.y + np.sin(action.yaw) * DRAG_LEN
    return 0.0 <= ex <= TRAY_W and 0.0 <= ey <= TRAY_H


def enumerate_action_grid() -> list:
    """The deployment grid: 15 x positions (3 cm apart), 12 y positions
    (2 cm apart), 8 yaws, 4 depths, 2 stiffness levels; 11520 actions."""
    xs = 0.5 * (TRAY_W - 14 * 0.03) + 0.03 * np.arange(15)
    ys = 0.5 * (TRAY_H - 11 * 0.02) + 0.02 * np.arange(12)
    depths = DEPTH_MIN + (DEPTH_MAX - DEPTH_MIN) / 3.0 * np.arange(4)
    actions = []
    for x in xs:
        for y in ys:
            for yaw in range(N_YAWS):
                for d in depths:
                    for stiff in STIFFNESS_LEVELS:
                        actions.append(ScoopAction(float(x), float(y), yaw, float(d), stiff))
    return actions


def generate_heightmap(rng: np.random.Generator, cfg: GenConfig = GenConfig()) -> np.ndarray:
    """Band-limited random field within the elevation and slope caps."""
    H = int(round(TRAY_H / cfg.grid_cell))
    W = int(round(TRAY_W / cfg.grid_cell))
    noise = rng.normal(size=(H, W))
    h = gaussian_filter(noise, sigma=6.0, mode="reflect")
    h -= h.min()
    peak = h.max()
    if peak <= 0.0:
        return np.zeros((H, W))
    h *= rng.uniform(0.05, MAX_ELEVATION) / peak
    gy, gx = np.gradient(h, cfg.grid_cell)
    slope = float(np.hypot(gx, gy).max())
    if slope > MAX_SLOPE:
        h *= MAX_SLOPE / slope
    return h


def _region_maps(rng: np.random.Generator, composition: str, n_materials: int, shape) -> tuple:
    H, W = shape
    hidden = None
    if composition == "single":
        region = np.zeros((H, W), dtype=np.int64)
    elif composition == "mixture":
        region = rng.integers(0, 2, size=(H, W)).astype(np.int64)
    elif composition == "partition":
        split = int(rng.uniform(0.35, 0.65) * W)
        region = np.zeros((H, W), dtype=np.int64)
        region[:, split:] = 1
    elif composition == "layers":
        split = int(rng.uniform(0.35, 0.65) * W)
        region = np.zeros((H, W), dtype=np.int64)
        region[:, split:] = 1
        side = int(rng.integers(0, 2))
        # the buried material must actually differ from the surface one
        below = n_materials - 1 if n_materials - 1 != side else 1 - side
        hidden = region.copy()
        hidden[region == side] = below
    else:
        raise ValueError(f"unknown composition {composition!r}")
    return region, hidden


def required_materials(composition: str) -> tuple:
    """(min, max) distinct materials for a composition."""
    if composition == "single":
        return 1, 1
    if composition in ("mixture", "partition"):
        return 2, 2
    if composition == "layers":
        return 2, 3
    raise ValueError(f"unknown composition {composition!r}")


def generate_task(task_id: str, materials, composition: str, seed, cfg: GenConfig = GenConfig()) -> TerrainTask:
    lo, hi = required_materials(composition)
    if not lo <= len(materials) <= hi:
        raise ValueError(f"{composition} needs between {lo} and {hi} materials, got {len(materials)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    heightmap = generate_heightmap(rng, cfg)
    region, hidden = _region_maps(rng, composition, len(materials), heightmap.shape)
    return TerrainTask(
        id=task_id,
        composition=composition,
        materials=tuple(materials),
        heightmap=heightmap,
        region_map=region,
        hidden_map=hidden,
        cell=cfg.grid_cell,
    )


def _bilinear(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray, cell: float) -> np.ndarray:
    """Sample a cell-centered grid at metric points, clamped at the borders."""
    H, W = grid.shape
    u = np.clip(xs / cell - 0.5, 0.0, W - 1.0)
    v = np.clip(ys / cell - 0.5, 0.0, H - 1.0)
    i0 = np.clip(np.floor(u).astype(int), 0, W - 2)
    j0 = np.clip(np.floor(v).astype(int), 0, H - 2)
    fu = u - i0
    fv = v - j0
    top = grid[j0, i0] * (1 - fu) + grid[j0, i0 + 1] * fu
    bot = grid[j0 + 1, i0] * (1 - fu) + grid[j0 + 1, i0 + 1] * fu
    return top * (1 - fv) + bot * fv


def _cell_of(x: float, y: float, shape, cell: float) -> tuple:
    H, W = shape
    col = min(max(int(x / cell), 0), W - 1)
    row = min(max(int(y / cell), 0), H - 1)
    return row, col


def observation_dim(cfg: GenConfig = GenConfig()) -> int:
    return cfg.patch_cells + 3 + cfg.appearance_dim


def gp_input_dim(cfg: GenConfig = GenConfig()) -> int:
    # observation features plus (depth, stiffness flag)
    return observation_dim(cfg) + 2


def compute_features_batch(task: TerrainTask, actions, cfg: GenConfig = GenConfig()) -> np.ndarray:
    """Observation features for many actions against the current terrain.

    Per action: the height relief profile along the drag axis, the mean
    signed gradient along the drag, the mean gradient magnitude and the
    height spread over a local patch rotated to the yaw, and the mean
    surface appearance over the dragged cells. Purely a function of
    (task state, action), so stored features can always be recomputed.
    """
    n = len(actions)
    P = cfg.patch_cells
    gy, gx = np.gradient(task.heightmap, task.cell)
    app = np.stack([m.appearance for m in task.materials])

    out = np.empty((n, observation_dim(cfg)))
    us = np.linspace(0.0, cfg.patch_extent, P)
    vs = np.linspace(-0.5 * cfg.patch_extent, 0.5 * cfg.patch_extent, P)
    UU, VV = np.meshgrid(us, vs, indexing="ij")
    for i, action in enumerate(actions):
        c, s = np.cos(action.yaw), np.sin(action.yaw)
        px = action.x + UU * c - VV * s
        py = action.y + UU * s + VV * c
        h_patch = _bilinear(task.heightmap, px.ravel(), py.ravel(), task.cell).reshape(P, P)
        gx_p = _bilinear(gx, px.ravel(), py.ravel(), task.cell)
        gy_p = _bilinear(gy, px.ravel(), py.ravel(), task.cell)

        line_x = action.x + us * c
        line_y = action.y + us * s
        h0 = _bilinear(task.heightmap, np.array([action.x]), np.array([action.y]), task.cell)[0]
        relief = _bilinear(task.heightmap, line_x, line_y, task.cell) - h0
        g_along = (_bilinear(gx, line_x, line_y, task.cell) * c
                   + _bilinear(gy, line_x, line_y, task.cell) * s)

        drag_cells = int(np.ceil(DRAG_LEN / cfg.patch_extent * (P - 1))) + 1
        rows_cols = [_cell_of(line_x[j], line_y[j], task.heightmap.shape, task.cell) for j in range(drag_cells)]
        surf = np.stack([app[task.region_map[r, cc]] for r, cc in rows_cols])

        out[i, :P] = relief
        out[i, P] = g_along.mean()
        out[i, P + 1] = np.hypot(gx_p, gy_p).mean()
        out[i, P + 2] = h_patch.std()
        out[i, P + 3:] = surf.mean(axis=0)
    return out


def compute_features(task: TerrainTask, action: ScoopAction, cfg: GenConfig = GenConfig()) -> np.ndarray:
    return compute_features_batch(task, [action], cfg)[0]


def assemble_gp_input(features: np.ndarray, action: ScoopAction) -> np.ndarray:
    """Observation-action vector consumed by the models.

    Depth is rescaled to [0, 1] so it carries weight comparable to the
    observation channels."""
    dn = (action.depth - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN)
    return np.concatenate([np.asarray(features, dtype=np.float64), [dn, action.stiffness_bit]])


def contact_material(task: TerrainTask, action: ScoopAction) -> Material:
    """Material governing the scoop: surface at the drag midpoint, or the
    hidden layer when digging past HIDDEN_DEPTH on a layered terrain."""
    mx = action.x + np.cos(action.yaw) * 0.5 * DRAG_LEN
    my = action.y + np.sin(action.yaw) * 0.5 * DRAG_LEN
    row, col = _cell_of(mx, my, task.heightmap.shape, task.cell)
    if task.hidden_map is not None and action.depth > HIDDEN_DEPTH:
        idx = int(task.hidden_map[row, col])
    else:
        idx = int(task.region_map[row, col])
    return task.materials[idx]


def reward_oracle(task: TerrainTask, action: ScoopAction, rng=None, cfg: GenConfig = GenConfig()) -> float:
    """Scooped volume in cm^3 for executing the action on the terrain.

    Noiseless when rng is None; otherwise heteroscedastic noise with
    std = noise_frac * value + noise_floor_cm3 is added before clamping
    at zero. Deterministic for a fixed (task, action, seed).
    """
    mat = contact_material(task, action)
    mx = action.x + np.cos(action.yaw) * 0.5 * DRAG_LEN
    my = action.y + np.sin(action.yaw) * 0.5 * DRAG_LEN
    gy, gx = np.gradient(task.heightmap, task.cell)
    g_along = (_bilinear(gx, np.array([mx]), np.array([my]), task.cell)[0] * np.cos(action.yaw)
               + _bilinear(gy, np.array([mx]), np.array([my]), task.cell)[0] * np.sin(action.yaw))

    dn = (action.depth - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN)
    volume_full = action.depth * DRAG_LEN * SCOOP_W * 1e6
    sens = mat.depth_sens - FILL_KNEE_WIDTH * float(
        np.log1p(np.exp((mat.depth_sens - FILL_KNEE) / FILL_KNEE_WIDTH)))
    # a scoop cannot carry more than its swept volume
    fill = min(mat.scoop_gain * (FILL_BASE + FILL_DEPTH * sens * dn), 1.0)
    slope_mod = max(1.0 + SLOPE_GAIN * mat.slope_pref * np.tanh(g_along / SLOPE_REF), 0.15)
    jam_drive = mat.jam * (JAM_BASE + JAM_DEPTH * dn) * float(expit(g_along / JAM_SLOPE_REF))
    if action.stiffness == "hard":
        jam_drive *= JAM_HARD_RELIEF
    lock = float(expit((mat.jam - JAM_LOCK_KNEE) / JAM_LOCK_WIDTH)) * (
        JAM_LOCK_BASE + JAM_LOCK_DEPTH * dn)
    gate = float(np.clip(1.0 - jam_drive - lock, GATE_MIN, 1.0))
    value = volume_full * fill * slope_mod * gate

    if rng is None:
        return float(value)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    std = cfg.noise_frac * value + cfg.noise_floor_cm3
    return float(max(value + rng.normal() * std, 0.0))


@dataclass(frozen=True)
class ScoopRecord:
    action: ScoopAction
    reward: float
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)
        if not np.isfinite(self.reward) or self.reward < 0.0:
            raise ValueError(f"reward must be finite and non-negative, got {self.reward}")


@dataclass(frozen=True)
class TaskDataset:
    task_id: str
    composition: str
    material_ids: tuple
    records: tuple

    def __post_init__(self):
        if not self.material_ids:
            raise ValueError("material_ids must be non-empty")
        dims = {r.features.shape[0] for r in self.records}
        if len(dims) > 1:
            raise ValueError(f"records disagree on feature dim: {sorted(dims)}")
        object.__setattr__(self, "material_ids", tuple(self.material_ids))
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def feature_dim(self) -> int:
        return self.records[0].features.shape[0] if self.records else 0

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    def gp_inputs(self) -> np.ndarray:
        return np.stack([assemble_gp_input(r.features, r.action) for r in self.records])


def _sample_action(rng: np.random.Generator) -> ScoopAction:
    while True:
        action = ScoopAction(
            x=float(rng.uniform(0.0, TRAY_W)),
            y=float(rng.uniform(0.0, TRAY_H)),
            yaw_index=int(rng.integers(0, N_YAWS)),
            depth=float(rng.uniform(DEPTH_MIN, DEPTH_MAX)),
            stiffness=STIFFNESS_LEVELS[int(rng.integers(0, 2))],
        )
        if action_feasible(action):
            return action


def _sample_records(task: TerrainTask, n: int, rng: np.random.Generator, cfg: GenConfig) -> TaskDataset:
    actions = [_sample_action(rng) for _ in range(n)]
    feats = compute_features_batch(task, actions, cfg)
    records = [
        ScoopRecord(action, reward_oracle(task, action, rng, cfg), feats[i])
        for i, action in enumerate(actions)
    ]
    return TaskDataset(task.id, task.composition, task.material_ids, tuple(records))


def _allocate(total: int, weights) -> list:
    """Largest-remainder allocation of total across weights."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts))
    for i in range(total - counts.sum()):
        counts[order[i % len(order)]] += 1
    return counts.tolist()

# composition mix of the offline database (single : partition : mixture)
OFFLINE_MIX = (8, 25, 18)


def sample_task_family(pool: MaterialPool, n_tasks: int, records_per_task: int, seed, cfg: GenConfig = GenConfig()):
    """Training-side terrains and their scoop datasets.

    Compositions are allocated in the offline 8:25:18 single:partition:mixture
    proportion; materials are drawn from the training pool only.
    """
    if len(pool.training) < 2:
        raise ValueError("training pool needs at least two materials")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x7A5C5])
    rng = np.random.default_rng(ss)
    counts = _allocate(n_tasks, OFFLINE_MIX)
    comps = ["single"] * counts[0] + ["partition"] * counts[1] + ["mixture"] * counts[2]
    rng.shuffle(comps)
    tasks = []
    datasets = []
    for i, comp in enumerate(comps):
        k = required_materials(comp)[0]
        idx = rng.choice(len(pool.training), size=k, replace=False)
        mats = [pool.training[j] for j in idx]
        task = generate_task(f"task{i:03d}", mats, comp, rng, cfg)
        tasks.append(task)
        datasets.append(_sample_records(task, records_per_task, rng, cfg))
    return tasks, datasets


def sample_offline_database(pool: MaterialPool, n_tasks: int = 51, records_per_task: int = 100, seed=0, cfg: GenConfig = GenConfig()) -> list:
    """Offline training database; the default sizes give 51 tasks x 100 records."""
    return sample_task_family(pool, n_tasks, records_per_task, seed, cfg)[1]


def sample_ood_test_family(pool: MaterialPool, n_tasks: int, records_per_task: int, seed, cfg: GenConfig = GenConfig()):
    """Held-out terrains: every task contains at least one OOD material.

    Compositions rotate through single/partition/mixture/layers; layered
    terrains hide the OOD material below the surface when possible.
    """
    if not pool.ood:
        raise ValueError("material pool has no OOD materials")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x7E575])
    rng = np.random.default_rng(ss)
    tasks = []
    datasets = []
    rotation = ("single", "partition", "mixture", "layers")
    # pair each composition with the novelty type it stresses hardest:
    # jamming surprises open terrain, depth-response surprises mixtures,
    # and layered tasks hide the barely scoopable material; when a
    # composition comes around again it gets the over-packing material, so
    # the family probes surprises in both directions
    preferred = {"single": 1, "partition": 1, "mixture": 2, "layers": 0}
    repeat_preferred = {"single": 3, "partition": 3, "mixture": 3}
    seen: dict = {}
    for i in range(n_tasks):
        comp = rotation[i % len(rotation)]
        visits = seen.get(comp, 0)
        seen[comp] = visits + 1
        table = preferred if visits % 2 == 0 else repeat_preferred
        ood_mat = pool.ood[table.get(comp, i) % len(pool.ood)]
        if comp == "single":
            mats = [ood_mat]
        elif comp == "layers":
            surf = rng.choice(len(pool.training), size=2, replace=False)
            mats = [pool.training[surf[0]], pool.training[surf[1]], ood_mat]
        else:
            other = pool.training[int(rng.integers(0, len(pool.training)))]
            mats = [other, ood_mat] if rng.random() < 0.5 else [ood_mat, other]
        task = generate_task(f"test{i:03d}", mats, comp, rng, cfg)
        tasks.append(task)
        datasets.append(_sample_records(task, records_per_task, rng, cfg))
    return tasks, datasets


# ---------------------------------------------------------------------------
# Canonical dataset interchange: records file + manifest file

RECORDS_SUFFIX = ".records.txt"
MANIFEST_SUFFIX = ".manifest.txt"

_FMT = "%.9g"


def _fmt(value: float) -> str:
    return _FMT % value


def write_database(prefix: str, datasets) -> tuple:
    """Write datasets to {prefix}.records.txt and {prefix}.manifest.txt."""
    records_path = prefix + RECORDS_SUFFIX
    manifest_path = prefix + MANIFEST_SUFFIX
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("# scoopgp manifest v1\n")
        fh.write("# task_id composition material_ids n_records feature_dim\n")
        for ds in datasets:
            fh.write(f"{ds.task_id} {ds.composition} {','.join(ds.material_ids)} {len(ds)} {ds.feature_dim}\n")
    with open(records_path, "w", encoding="utf-8") as fh:
        fh.write("# scoopgp records v1\n")
        fh.write("# task_id material_ids composition x y yaw_index depth stiffness reward features...\n")
        for ds in datasets:
            mats = ",".join(ds.material_ids)
            for rec in ds.records:
                a = rec.action
                head = (f"{ds.task_id} {mats} {ds.composition} {_fmt(a.x)} {_fmt(a.y)} "
                        f"{a.yaw_index} {_fmt(a.depth)} {a.stiffness} {_fmt(rec.reward)}")
                feats = " ".join(_fmt(v) for v in rec.features)
                fh.write(head + " " + feats + "\n")
    return records_path, manifest_path


def _parse_float(token: str, path: str, line: int, fieldname: str) -> float:
    try:
        return float(token)
    except ValueError as exc:
        raise IngestError(f"cannot parse number {token!r}", path, line, fieldname) from exc


def read_database(path: str) -> list:
    """Read datasets back from a records file (or a prefix).

    Validates every record against the schema and the manifest; any
    violation raises IngestError naming the file, line and field.
    """
    if path.endswith(RECORDS_SUFFIX):
        prefix = path[: -len(RECORDS_SUFFIX)]
    else:
        prefix = path
    records_path = prefix + RECORDS_SUFFIX
    manifest_path = prefix + MANIFEST_SUFFIX
    if not os.path.exists(records_path):
        raise IngestError("records file not found", records_path)
    if not os.path.exists(manifest_path):
        raise IngestError("manifest file not found", manifest_path)

    manifest = {}
    order = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise IngestError(f"manifest line has {len(parts)} fields, expected 5", manifest_path, lineno)
            task_id, comp, mats, n_records, feature_dim = parts
            if comp not in COMPOSITIONS:
                raise IngestError(f"unknown composition {comp!r}", manifest_path, lineno, "composition")
            if task_id in manifest:
                raise IngestError(f"duplicate task {task_id!r}", manifest_path, lineno, "task_id")
            manifest[task_id] = {
                "composition": comp,
                "materials": tuple(mats.split(",")),
                "n_records": int(n_records),
                "feature_dim": int(feature_dim),
                "rows": [],
            }
            order.append(task_id)

    with open(records_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 10:
                raise IngestError(f"record has {len(parts)} fields, expected at least 10", records_path, lineno)
            task_id = parts[0]
            if task_id not in manifest:
                raise IngestError(f"record for task {task_id!r} missing from manifest", records_path, lineno, "task_id")
            entry = manifest[task_id]
            mats = tuple(parts[1].split(","))
            if mats != entry["materials"]:
                raise IngestError(f"material ids {mats} disagree with manifest {entry['materials']}", records_path, lineno, "material_ids")
            if parts[2] != entry["composition"]:
                raise IngestError(f"composition {parts[2]!r} disagrees with manifest", records_path, lineno, "composition")
            x = _parse_float(parts[3], records_path, lineno, "x")
            y = _parse_float(parts[4], records_path, lineno, "y")
            try:
                yaw_index = int(parts[5])
            except ValueError as exc:
                raise IngestError(f"bad yaw index {parts[5]!r}", records_path, lineno, "yaw_index") from exc
            depth = _parse_float(parts[6], records_path, lineno, "depth")
            stiffness = parts[7]
            reward = _parse_float(parts[8], records_path, lineno, "reward")
            feats = np.array([_parse_float(t, records_path, lineno, "features") for t in parts[9:]])
            if feats.shape[0] != entry["feature_dim"]:
                raise IngestError(
                    f"feature count {feats.shape[0]} does not match manifest dim {entry['feature_dim']}",
                    records_path, lineno, "features",
                )
            if reward < 0.0 or not np.isfinite(reward):
                raise IngestError(f"reward {reward} must be finite and non-negative", records_path, lineno, "reward")
            try:
                action = ScoopAction(x, y, yaw_index, depth, stiffness)
            except ValueError as exc:
                raise IngestError(str(exc), records_path, lineno, "action") from exc
            entry["rows"].append(ScoopRecord(action, reward, feats))

    datasets = []
    for task_id in order:
        entry = manifest[task_id]
        if len(entry["rows"]) != entry["n_records"]:
            raise IngestError(
                f"task {task_id} has {len(entry['rows'])} records, manifest declares {entry['n_records']}",
                records_path, 0, "n_records",
            )
        datasets.append(TaskDataset(task_id, entry["composition"], entry["materials"], tuple(entry["rows"])))
    if not any(len(ds) for ds in datasets):
        raise IngestError("dataset is empty", records_path)
    return datasets


@dataclass(frozen=True)
class IngestReport:
    n_tasks: int
    n_records: int
    mean_reward: float
    max_reward: float
    composition_counts: dict = field(default_factory=dict)

    def render(self) -> str:
        comps = " ".join(f"{k}={v}" for k, v in sorted(self.composition_counts.items()))
        return (f"tasks={self.n_tasks} records={self.n_records} "
                f"mean_reward={self.mean_reward:.1f} max_reward={self.max_reward:.1f} {comps}")


def ingest_released_dataset(path: str):
    """Validate a canonical-format dataset and report global statistics.

    Returns (datasets, IngestReport). Raises IngestError on any schema
    violation; nothing is returned partially.
    """
    datasets = read_database(path)
    rewards = np.concatenate([ds.rewards() for ds in datasets if len(ds)])
    counts = {}
    for ds in datasets:
        counts[ds.composition] = counts.get(ds.composition, 0) + 1
    report = IngestReport(
        n_tasks=len(datasets),
        n_records=int(sum(len(ds) for ds in datasets)),
        mean_reward=float(rewards.mean()),
        max_reward=float(rewards.max()),
        composition_counts=counts,
    )
    return datasets, report


# ---------------------------------------------------------------------------
# Terrain bundles (binary, for live-mode deployment)

def save_terrains(path: str, tasks, cfg: GenConfig = GenConfig()) -> None:
    materials = {}
    for task in tasks:
        for m in task.materials:
            materials[m.id] = m
    mat_ids = sorted(materials)
    meta = {
        "cell": cfg.grid_cell,
        "appearance_dim": int(cfg.appearance_dim),
        "material_ids": mat_ids,
        "tasks": [
            {
                "id": t.id,
                "composition": t.composition,
                "materials": list(t.material_ids),
                "has_hidden": t.hidden_map is not None,
                "shape": list(t.heightmap.shape),
            }
            for t in tasks
        ],
    }
    blocks = [np.stack([materials[i].latent for i in mat_ids]),
              np.stack([materials[i].appearance for i in mat_ids])]
    for t in tasks:
        blocks.append(t.heightmap)
        blocks.append(t.region_map.astype(np.int64))
        if t.hidden_map is not None:
            blocks.append(t.hidden_map.astype(np.int64))
    write_container(path, "terrains", meta, blocks)


def load_terrains(path: str) -> list:
    meta, blocks = read_container(path, "terrains")
    mat_ids = meta["material_ids"]
    latents, appearances = blocks[0], blocks[1]
    materials = {
        mid: Material(mid, latents[i], appearances[i]) for i, mid in enumerate(mat_ids)
    }
    tasks = []
    cursor = 2
    for entry in meta["tasks"]:
        heightmap = blocks[cursor]
        region = blocks[cursor + 1]
        cursor += 2
        hidden = None
        if entry["has_hidden"]:
            hidden = blocks[cursor]
            cursor += 1
        tasks.append(TerrainTask(
            id=entry["id"],
            composition=entry["composition"],
            materials=tuple(materials[m] for m in entry["materials"]),
            heightmap=heightmap,
            region_map=region,
            hidden_map=hidden,
            cell=float(meta["cell"]),
        ))
    return tasks
