"""Decision-making loop: posterior scoring, action selection, deployment.

A deployment episode scores every candidate action, executes the best
feasible one, observes a reward, and either stops (reward reached the
threshold) or adds the observation to the support set and repeats. The
support set only ever holds below-threshold observations. Dataset mode
replays logged scoops and removes each executed action from the pool;
live mode queries the reward oracle against a mutable terrain whose
heightmap loses the scooped volume after every attempt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GenConfig
from .errors import SelectionError
from .gp import DeepGpModel, mean_eval_batch, posterior_batch
from .tasks import (
    DRAG_LEN,
    SCOOP_W,
    ScoopAction,
    TaskDataset,
    TerrainTask,
    action_feasible,
    assemble_gp_input,
    compute_features_batch,
    enumerate_action_grid,
    reward_oracle,
)

SCORER_KINDS = ("ucb", "greedy", "mean", "random")


@dataclass(frozen=True)
class ScorerConfig:
    """How candidate actions are ranked.

    ucb:    posterior mean + gamma * posterior std (adaptive)
    greedy: posterior mean (adaptive)
    mean:   prior mean only, support ignored (the non-adaptive baseline)
    random: uniform random scores, no model involved
    """

    kind: str = "ucb"
    gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise ValueError(f"scorer kind must be one of {SCORER_KINDS}, got {self.kind!r}")


class SupportSet:
    """Append-only collection of observed (input, reward) pairs."""

    def __init__(self, input_dim: int):
        self.input_dim = int(input_dim)
        self._xs: list = []
        self._ys: list = []

    def __len__(self) -> int:
        return len(self._xs)

    def append(self, x: np.ndarray, reward: float) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ValueError(f"support input shape {x.shape} does not match dim {self.input_dim}")
        self._xs.append(x)
        self._ys.append(float(reward))

    def arrays(self) -> tuple:
        if not self._xs:
            return np.zeros((0, self.input_dim)), np.zeros(0)
        return np.stack(self._xs), np.array(self._ys)


def score_ucb(model: DeepGpModel, support: SupportSet, candidates: np.ndarray, gamma: float = 2.0) -> np.ndarray:
    """Optimistic score mean + gamma * std at each candidate."""
    xs, ys = support.arrays()
    mu, var = posterior_batch(model, xs, ys, candidates)
    return mu + gamma * np.sqrt(var)


def score_greedy(model: DeepGpModel, support: SupportSet, candidates: np.ndarray) -> np.ndarray:
    """Posterior mean at each candidate."""
    xs, ys = support.arrays()
    mu, _ = posterior_batch(model, xs, ys, candidates)
    return mu


def score_mean_only(model: DeepGpModel, candidates: np.ndarray) -> np.ndarray:
    """Prior mean; the support set plays no role."""
    return mean_eval_batch(model, candidates)


def select_action(scores: np.ndarray, feasible: np.ndarray, tie_seed=None) -> int:
    """Index of the best feasible score; exact ties go to the lowest index
    (or uniformly among the tied when tie_seed is given)."""
    scores = np.asarray(scores, dtype=np.float64)
    feasible = np.asarray(feasible, dtype=bool)
    if scores.shape != feasible.shape:
        raise ValueError(f"scores shape {scores.shape} does not match mask shape {feasible.shape}")
    if not feasible.any():
        raise SelectionError("no feasible candidate action")
    masked = np.where(feasible, scores, -np.inf)
    best = masked.max()
    ties = np.flatnonzero(masked == best)
    if tie_seed is None or len(ties) == 1:
        return int(ties[0])
    rng = np.random.default_rng(tie_seed)
    return int(ties[int(rng.integers(0, len(ties)))])


@dataclass(frozen=True)
class EpisodeStep:
    action: ScoopAction
    score: float
    reward: float
    support_size: int


@dataclass(frozen=True)
class DeploymentTrace:
    task_id: str
    threshold: float
    budget: int
    episodes: tuple
    success: bool

    @property
    def attempts(self) -> int:
        return len(self.episodes)

    def to_text(self) -> str:
        lines = [
            f"# deployment trace task={self.task_id} threshold={self.threshold:.9g} "
            f"budget={self.budget} attempts={self.attempts} success={int(self.success)}",
            "# episode x y yaw_index depth stiffness score reward support_size",
        ]
        for i, e in enumerate(self.episodes, start=1):
            a = e.action
            lines.append(
                f"{i} {a.x:.9g} {a.y:.9g} {a.yaw_index} {a.depth:.9g} {a.stiffness} "
                f"{e.score:.9g} {e.reward:.9g} {e.support_size}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DatasetTarget:
    """Replay logged scoops: executing a candidate returns its stored reward."""

    dataset: TaskDataset


@dataclass(frozen=True)
class LiveTarget:
    """Score the full action grid against a synthetic terrain."""

    task: TerrainTask
    cfg: GenConfig = field(default_factory=GenConfig)


def _compute_scores(model, scorer: ScorerConfig, support: SupportSet, candidates: np.ndarray, rng) -> np.ndarray:
    if scorer.kind == "random":
        return rng.random(candidates.shape[0])
    if model is None:
        raise ValueError(f"scorer {scorer.kind!r} needs a model")
    if scorer.kind == "ucb":
        return score_ucb(model, support, candidates, scorer.gamma)
    if scorer.kind == "greedy":
        return score_greedy(model, support, candidates)
    return score_mean_only(model, candidates)


def _scoop_terrain(task: TerrainTask, action: ScoopAction, volume_cm3: float) -> None:
    """Lower the heightmap by the removed volume, spread over the drag footprint."""
    if volume_cm3 <= 0.0:
        return
    H, W = task.heightmap.shape
    ys, xs = np.meshgrid(
        (np.arange(H) + 0.5) * task.cell, (np.arange(W) + 0.5) * task.cell, indexing="ij"
    )
    dx, dy = np.cos(action.yaw), np.sin(action.yaw)
    rel_x = xs - action.x
    rel_y = ys - action.y
    t = np.clip(rel_x * dx + rel_y * dy, 0.0, DRAG_LEN)
    dist = np.hypot(rel_x - t * dx, rel_y - t * dy)
    footprint = dist <= 0.5 * SCOOP_W
    n_cells = int(footprint.sum())
    if n_cells == 0:
        return
    drop = (volume_cm3 * 1e-6) / (n_cells * task.cell * task.cell)
    task.heightmap[footprint] = np.maximum(task.heightmap[footprint] - drop, 0.0)


def run_deployment(model, scorer: ScorerConfig, target, threshold: float, budget: int, seed=0) -> DeploymentTrace:
    """Run one deployment until an at-threshold reward or budget exhaustion.

    Every executed observation below the threshold is appended to the
    support set before the next episode, so adaptive scorers condition on
    all failures so far.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xDE9107]))

    if isinstance(target, DatasetTarget):
        ds = target.dataset
        if not len(ds):
            raise ValueError(f"task {ds.task_id} has no records to deploy against")
        candidates = ds.gp_inputs()
        rewards = ds.rewards()
        if rewards.max() < threshold:
            raise ValueError(
                f"task {ds.task_id}: no recorded reward reaches the threshold {threshold:.3g} "
                f"(max is {rewards.max():.3g})"
            )
        available = np.ones(len(ds), dtype=bool)
        support = SupportSet(candidates.shape[1])
        episodes = []
        success = False
        while len(episodes) < budget:
            scores = _compute_scores(model, scorer, support, candidates, rng)
            idx = select_action(scores, available)
            reward = float(rewards[idx])
            available[idx] = False
            took = ds.records[idx].action
            if reward >= threshold:
                episodes.append(EpisodeStep(took, float(scores[idx]), reward, len(support)))
                success = True
                break
            support.append(candidates[idx], reward)
            episodes.append(EpisodeStep(took, float(scores[idx]), reward, len(support)))
            if not available.any():
                break
        return DeploymentTrace(ds.task_id, float(threshold), int(budget), tuple(episodes), success)

    if isinstance(target, LiveTarget):
        task = target.task.copy()
        cfg = target.cfg
        actions = enumerate_action_grid()
        feasible = np.array([action_feasible(a) for a in actions])
        support = None
        episodes = []
        success = False
        while len(episodes) < budget:
            feats = compute_features_batch(task, actions, cfg)
            candidates = np.stack([assemble_gp_input(feats[i], a) for i, a in enumerate(actions)])
            if support is None:
                support = SupportSet(candidates.shape[1])
            scores = _compute_scores(model, scorer, support, candidates, rng)
            idx = select_action(scores, feasible)
            noise_seed = int(rng.integers(0, 2 ** 31 - 1))
            reward = reward_oracle(task, actions[idx], noise_seed, cfg)
            _scoop_terrain(task, actions[idx], reward)
            if reward >= threshold:
                episodes.append(EpisodeStep(actions[idx], float(scores[idx]), reward, len(support)))
                success = True
                break
            support.append(candidates[idx], reward)
            episodes.append(EpisodeStep(actions[idx], float(scores[idx]), reward, len(support)))
        return DeploymentTrace(task.id, float(threshold), int(budget), tuple(episodes), success)

    raise TypeError(f"target must be DatasetTarget or LiveTarget, got {type(target).__name__}")
