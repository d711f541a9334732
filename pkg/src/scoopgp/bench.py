"""Evaluation protocols and report files.

Two protocols mirror the deployment questions: how accurate are reward
predictions after k support scoops (k-shot MAE, with a separate average
over each terrain's five largest-reward samples), and how many attempts
does a policy need to reach an above-threshold scoop. Reports serialize
to structured text whose aggregate lines recompute exactly from the
per-task rows, and every report names the seed and checkpoint it came from.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .decide import DatasetTarget, ScorerConfig, run_deployment
from .errors import IngestError
from .gp import DeepGpModel, checkpoint_id, mean_eval_batch, posterior_batch

_QUERY_TAG = 0x9E41
_SUPPORT_TAG = 0x51A9


def _task_tag(task_id: str) -> int:
    return int.from_bytes(hashlib.sha256(task_id.encode("utf-8")).digest()[:4], "big")


def query_split(seed: int, task_id: str, trial: int, n_records: int, query_fraction: float = 0.8):
    """Deterministic query/support-pool split for one evaluation trial.

    The query indices depend only on (seed, task, trial), never on how the
    support set is later drawn, so zero-shot results are invariant to
    support sampling.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _task_tag(task_id), int(trial), _QUERY_TAG])
    )
    perm = rng.permutation(n_records)
    n_query = max(1, int(np.floor(query_fraction * n_records)))
    n_query = min(n_query, n_records - 1) if n_records > 1 else 1
    return perm[:n_query], perm[n_query:]


def _support_order(seed: int, task_id: str, trial: int, pool: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _task_tag(task_id), int(trial), _SUPPORT_TAG])
    )
    return pool[rng.permutation(len(pool))]


@dataclass(frozen=True)
class MaeRow:
    task_id: str
    shot: int
    mae: float
    top_mae: float


@dataclass(frozen=True)
class MaeReport:
    label: str
    seed: int
    checkpoint: str
    trials: int
    shots: tuple
    rows: tuple
    aggregates: dict = field(default_factory=dict)

    def aggregate(self, shot: int) -> tuple:
        return self.aggregates[shot]


def _aggregate_rows(rows, shots) -> dict:
    out = {}
    for shot in shots:
        maes = [r.mae for r in rows if r.shot == shot]
        tops = [r.top_mae for r in rows if r.shot == shot]
        out[int(shot)] = (float(np.mean(maes)), float(np.mean(tops)))
    return out


def eval_kshot_mae(model: DeepGpModel, datasets, shots=(0, 5, 10), trials: int = 30, seed: int = 0,
                   query_fraction: float = 0.8, top_k: int = 5) -> MaeReport:
    """k-shot reward prediction error per task.

    Each trial holds out a query fraction of the records; the support set
    is drawn from the remainder (prefixes of one shuffled order, so the
    supports nest across shots). MAE is averaged over the query set and,
    separately, over its top_k largest-reward samples, then averaged over
    trials. Zero shots means the prior mean and is support-independent.
    """
    shots = tuple(int(s) for s in shots)
    rows = []
    for ds in datasets:
        X = ds.gp_inputs()
        y = ds.rewards()
        n = len(ds)
        if n < 2:
            raise ValueError(f"task {ds.task_id} has too few records for the query split")
        acc = {s: [0.0, 0.0] for s in shots}
        for trial in range(trials):
            q_idx, pool = query_split(seed, ds.task_id, trial, n, query_fraction)
            order = _support_order(seed, ds.task_id, trial, pool)
            max_shot = max(shots)
            if max_shot > len(order):
                raise ValueError(
                    f"task {ds.task_id}: {max_shot} shots exceed the {len(order)} records "
                    f"left outside the query set"
                )
            yq = y[q_idx]
            top_idx = np.argsort(-yq)[:top_k]
            for s in shots:
                sup = order[:s]
                mu, _ = posterior_batch(model, X[sup], y[sup], X[q_idx])
                err = np.abs(mu - yq)
                acc[s][0] += float(err.mean())
                acc[s][1] += float(err[top_idx].mean())
        for s in shots:
            rows.append(MaeRow(ds.task_id, s, acc[s][0] / trials, acc[s][1] / trials))
    report = MaeReport(
        label="kshot-mae",
        seed=int(seed),
        checkpoint=checkpoint_id(model),
        trials=int(trials),
        shots=shots,
        rows=tuple(rows),
        aggregates=_aggregate_rows(rows, shots),
    )
    return report


def mean_model_mae(model: DeepGpModel, datasets, trials: int = 30, seed: int = 0,
                   query_fraction: float = 0.8, top_k: int = 5) -> MaeReport:
    """Prediction error of the prior mean alone, on the same query sets the
    k-shot protocol draws. The non-adaptive reference: no support, no kernel."""
    rows = []
    for ds in datasets:
        X = ds.gp_inputs()
        y = ds.rewards()
        n = len(ds)
        mae_sum = 0.0
        top_sum = 0.0
        for trial in range(trials):
            q_idx, _ = query_split(seed, ds.task_id, trial, n, query_fraction)
            yq = y[q_idx]
            top_idx = np.argsort(-yq)[:top_k]
            mu = mean_eval_batch(model, X[q_idx])
            err = np.abs(mu - yq)
            mae_sum += float(err.mean())
            top_sum += float(err[top_idx].mean())
        rows.append(MaeRow(ds.task_id, 0, mae_sum / trials, top_sum / trials))
    return MaeReport(
        label="mean-only-mae",
        seed=int(seed),
        checkpoint=checkpoint_id(model),
        trials=int(trials),
        shots=(0,),
        rows=tuple(rows),
        aggregates=_aggregate_rows(rows, (0,)),
    )


@dataclass(frozen=True)
class DeployRow:
    task_id: str
    trial: int
    attempts: int
    success: bool


@dataclass(frozen=True)
class DeployReport:
    method: str
    seed: int
    checkpoint: str
    budget: int
    trials: int
    rows: tuple
    excluded: tuple = ()

    @property
    def avg_attempts(self) -> float:
        return float(np.mean([r.attempts for r in self.rows]))

    @property
    def max_attempts(self) -> int:
        return int(max(r.attempts for r in self.rows))

    @property
    def success_rate(self) -> float:
        return float(np.mean([1.0 if r.success else 0.0 for r in self.rows]))

    def attempts_by_cell(self) -> dict:
        return {(r.task_id, r.trial): r.attempts for r in self.rows}


def deployment_threshold(dataset, rank: int = 5) -> float:
    """The rank-th largest recorded reward (default: fifth)."""
    rewards = np.sort(dataset.rewards())
    if len(rewards) < rank:
        raise ValueError(f"task {dataset.task_id} has {len(rewards)} records, needs at least {rank}")
    return float(rewards[-rank])


def eval_simulated_deployment(methods: dict, datasets, budget: int = 20, trials: int = 10, seed: int = 0,
                              exclude_below: float = 5.0, threshold_rank: int = 5) -> dict:
    """Dataset-mode deployment for each named (model, scorer) pair.

    The per-task threshold is the fifth-largest recorded reward. Tasks
    whose threshold falls below exclude_below are dropped (the barely
    scoopable analog) and named in every report. Attempts count the
    episodes run; a failed run counts the full budget.
    """
    included = []
    excluded = []
    for ds in datasets:
        if deployment_threshold(ds, threshold_rank) < exclude_below:
            excluded.append(ds.task_id)
        else:
            included.append(ds)
    if not included:
        raise ValueError("every task fell below the deployment threshold floor")

    out = {}
    for mi, (name, (model, scorer)) in enumerate(sorted(methods.items())):
        rows = []
        for ds in included:
            B = deployment_threshold(ds, threshold_rank)
            for trial in range(trials):
                run_seed = np.random.SeedSequence(
                    [int(seed) & 0xFFFFFFFF, _task_tag(ds.task_id), mi, trial]
                ).generate_state(1)[0]
                trace = run_deployment(model, scorer, DatasetTarget(ds), B, budget, int(run_seed))
                rows.append(DeployRow(ds.task_id, trial, trace.attempts, trace.success))
        out[name] = DeployReport(
            method=name,
            seed=int(seed),
            checkpoint=checkpoint_id(model) if model is not None else "none",
            budget=int(budget),
            trials=int(trials),
            rows=tuple(rows),
            excluded=tuple(excluded),
        )
    return out


def paired_sign_test(a, b) -> float:
    """One-sided sign test that paired values in a are smaller than in b.

    Ties are dropped. Returns the p-value of seeing at least as many wins
    under a fair coin.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have the same shape")
    wins = int(np.sum(a < b))
    losses = int(np.sum(a > b))
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# Report files

_FMT = "%.9g"


def write_mae_report(path: str, report: MaeReport) -> None:
    lines = [
        "# scoopgp mae-report v1",
        f"# label={report.label} seed={report.seed} checkpoint={report.checkpoint} "
        f"trials={report.trials} shots={','.join(str(s) for s in report.shots)}",
        "# columns: task_id shot mae top_mae",
    ]
    quant = []
    for r in report.rows:
        mae_s, top_s = _FMT % r.mae, _FMT % r.top_mae
        quant.append(MaeRow(r.task_id, r.shot, float(mae_s), float(top_s)))
        lines.append(f"{r.task_id} {r.shot} {mae_s} {top_s}")
    for shot in report.shots:
        mae, top = _aggregate_rows(quant, (shot,))[shot]
        lines.append(f"#aggregate {shot} {_FMT % mae} {_FMT % top}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mae_report(path: str) -> MaeReport:
    """Parse a report file, recomputing and checking its aggregate lines."""
    label, seed, checkpoint, trials, shots = "", 0, "", 0, ()
    rows = []
    stated = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#aggregate"):
                parts = line.split()
                stated[int(parts[1])] = (float(parts[2]), float(parts[3]))
                continue
            if line.startswith("#"):
                if "label=" in line:
                    kv = dict(tok.split("=", 1) for tok in line.lstrip("# ").split() if "=" in tok)
                    label = kv.get("label", "")
                    seed = int(kv.get("seed", 0))
                    checkpoint = kv.get("checkpoint", "")
                    trials = int(kv.get("trials", 0))
                    shots = tuple(int(s) for s in kv.get("shots", "").split(",") if s != "")
                continue
            parts = line.split()
            if len(parts) != 4:
                raise IngestError(f"mae row has {len(parts)} fields, expected 4", path, lineno)
            rows.append(MaeRow(parts[0], int(parts[1]), float(parts[2]), float(parts[3])))
    aggregates = _aggregate_rows(rows, shots)
    for shot, stated_pair in stated.items():
        got = aggregates[shot]
        # compare at the file's printed precision
        got_q = (float(_FMT % got[0]), float(_FMT % got[1]))
        if got_q != stated_pair:
            raise IngestError(
                f"aggregate for shot {shot} is {stated_pair}, rows recompute to {got_q}", path
            )
    return MaeReport(label=label, seed=seed, checkpoint=checkpoint, trials=trials,
                     shots=shots, rows=tuple(rows), aggregates=aggregates)


def write_deploy_report(path: str, report: DeployReport) -> None:
    lines = [
        "# scoopgp deploy-report v1",
        f"# method={report.method} seed={report.seed} checkpoint={report.checkpoint} "
        f"budget={report.budget} trials={report.trials} excluded={','.join(report.excluded) or 'none'}",
        "# columns: task_id trial attempts success",
    ]
    for r in report.rows:
        lines.append(f"{r.task_id} {r.trial} {r.attempts} {int(r.success)}")
    lines.append(f"#aggregate avg={_FMT % report.avg_attempts} max={report.max_attempts} "
                 f"success_rate={_FMT % report.success_rate}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_deploy_report(path: str) -> DeployReport:
    method, seed, checkpoint, budget, trials = "", 0, "", 0, 0
    excluded = ()
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#aggregate"):
                continue
            if line.startswith("#"):
                if "method=" in line:
                    kv = dict(tok.split("=", 1) for tok in line.lstrip("# ").split() if "=" in tok)
                    method = kv.get("method", "")
                    seed = int(kv.get("seed", 0))
                    checkpoint = kv.get("checkpoint", "")
                    budget = int(kv.get("budget", 0))
                    trials = int(kv.get("trials", 0))
                    raw_ex = kv.get("excluded", "none")
                    excluded = () if raw_ex == "none" else tuple(raw_ex.split(","))
                continue
            parts = line.split()
            if len(parts) != 4:
                raise IngestError(f"deploy row has {len(parts)} fields, expected 4", path, lineno)
            rows.append(DeployRow(parts[0], int(parts[1]), int(parts[2]), bool(int(parts[3]))))
    return DeployReport(method=method, seed=seed, checkpoint=checkpoint, budget=budget,
                        trials=trials, rows=tuple(rows), excluded=excluded)


def pool_mae_reports(reports) -> dict:
    """Aggregate rows from several reports (tasks x seeds) per shot."""
    shots = sorted({r.shot for rep in reports for r in rep.rows})
    rows = [r for rep in reports for r in rep.rows]
    return _aggregate_rows(rows, shots)


def render_mae_table(reports_by_method: dict) -> str:
    """Aligned text table: one row per method, MAE / top-sample MAE per shot."""
    shots = sorted({r.shot for reps in reports_by_method.values() for rep in reps for r in rep.rows})
    header = ["method"] + [f"{s}-shot MAE" for s in shots] + [f"{s}-shot top MAE" for s in shots]
    body = []
    for method in sorted(reports_by_method):
        pooled = pool_mae_reports(reports_by_method[method])
        row = [method]
        row += [f"{pooled[s][0]:.1f}" if s in pooled else "-" for s in shots]
        row += [f"{pooled[s][1]:.1f}" if s in pooled else "-" for s in shots]
        body.append(row)
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header)] + [fmt.format(*row) for row in body]
    return "\n".join(lines) + "\n"


def render_deploy_table(reports: dict) -> str:
    header = ["method", "avg attempts", "max attempts", "success rate"]
    body = []
    for name in sorted(reports):
        rep = reports[name]
        body.append([name, f"{rep.avg_attempts:.1f}", str(rep.max_attempts), f"{rep.success_rate:.2f}"])
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header)] + [fmt.format(*row) for row in body]
    return "\n".join(lines) + "\n"
