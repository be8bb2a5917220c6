"""Post-hoc analyses of a trained cross-modulation network.

* noise ablation: multiply gamma0/beta0 of chosen blocks by N(mean, std) draws
* magnitude summaries of the gamma0/beta0 post-multipliers
* self/cross split of each FiLM generator's weight matrix
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .data import DatasetSplit
from .model import MODULATED_BLOCKS, Network
from .training import EvalReport, evaluate

NORM_CSV_HEADER = ["block", "self_norm_mean", "cross_norm_mean"]
POSTMULT_CSV_HEADER = ["block", "param", "min", "q1", "median", "q3", "max", "mean"]
ABLATION_CSV_HEADER = ["blocks_noised", "mean_acc", "ci95", "n", "seed"]


@dataclass(frozen=True)
class NoiseSpec:
    target_blocks: tuple[int, ...] = MODULATED_BLOCKS
    mean: float = 1.0
    stddev: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.stddev < 0:
            raise ValueError("noise stddev must be non-negative")
        bad = set(self.target_blocks) - set(MODULATED_BLOCKS)
        if bad:
            raise ValueError(f"blocks {sorted(bad)} are not modulated; choose from {MODULATED_BLOCKS}")
        object.__setattr__(self, "target_blocks", tuple(sorted(set(self.target_blocks))))

    def draw(self, episode_index: int, channels: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Per-channel multipliers for one episode's forward pass."""
        rng = np.random.default_rng([self.seed, episode_index])
        return {
            b: (rng.normal(self.mean, self.stddev, channels), rng.normal(self.mean, self.stddev, channels))
            for b in self.target_blocks
        }

    @property
    def label(self) -> str:
        return ",".join(str(b) for b in self.target_blocks) or "none"


def ablate_with_noise(
    net: Network,
    split: DatasetSplit,
    spec: NoiseSpec,
    episodes: int = 1000,
    way: int = 5,
    shot: int = 1,
    queries_per_class: int = 15,
    seed: int = 0,
    bn_mode: str = "eval",
    workers: int = 1,
) -> EvalReport:
    """Evaluate with noisy post-multipliers; stored parameters are never modified."""
    if not net.generators:
        raise ValueError("no modulation to perturb: baseline network")
    channels = net.generators[MODULATED_BLOCKS[0]].channels

    def perturb(i: int):
        return spec.draw(i, channels)

    return evaluate(
        net,
        split,
        episodes=episodes,
        way=way,
        shot=shot,
        queries_per_class=queries_per_class,
        seed=seed,
        bn_mode=bn_mode,
        workers=workers,
        perturb=perturb,
    )


@dataclass
class AblationRow:
    blocks_noised: str
    mean_acc: float
    ci95: float
    n: int
    seed: int


def ablation_table(
    net: Network,
    split: DatasetSplit,
    block_sets: Iterable[Iterable[int]] = ((), (2,), (3,), (4,), (2, 3, 4)),
    mean: float = 1.0,
    stddev: float = 0.3,
    noise_seed: int = 0,
    **eval_kwargs,
) -> list[AblationRow]:
    """One evaluation per block set, all on the same episodes and noise seed."""
    rows = []
    seed = eval_kwargs.get("seed", 0)
    for blocks in block_sets:
        spec = NoiseSpec(tuple(blocks), mean, stddev, noise_seed)
        report = ablate_with_noise(net, split, spec, **eval_kwargs)
        rows.append(AblationRow(spec.label, report.mean_accuracy, report.ci95_halfwidth, report.episode_count, seed))
    return rows


# ---------------------------------------------------------------------------
# post-multipliers


@dataclass
class ParamSummary:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    values: list[float] = field(repr=False)


def summarize_abs(values) -> ParamSummary:
    a = np.abs(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return ParamSummary(float(a.min()), float(q1), float(med), float(q3), float(a.max()), float(a.mean()), a.tolist())


def postmultiplier_stats(net: Network) -> dict[int, dict[str, ParamSummary]]:
    """|gamma0| and |beta0| distribution per modulated block."""
    if not net.generators:
        raise ValueError("baseline network has no post-multipliers")
    return {
        b: {"gamma0": summarize_abs(gen.gamma0.data), "beta0": summarize_abs(gen.beta0.data)}
        for b, gen in sorted(net.generators.items())
    }


# ---------------------------------------------------------------------------
# generator weight decomposition


@dataclass
class NormReport:
    blocks: dict[int, tuple[float, float]]  # block -> (self_norm_mean, cross_norm_mean)

    def rows(self) -> list[list]:
        return [[b, s, c] for b, (s, c) in sorted(self.blocks.items())]


def split_norms(W: np.ndarray) -> tuple[float, float]:
    """Mean L2 norm of the outgoing weight rows fed by the self half and by the other half."""
    W = np.asarray(W, dtype=np.float64)
    c = W.shape[0] // 2
    row_norms = np.linalg.norm(W, axis=1)
    return float(row_norms[:c].mean()), float(row_norms[c:].mean())


def generator_norm_decomposition(net: Network) -> NormReport:
    if not net.generators:
        raise ValueError("baseline network has no FiLM generators")
    return NormReport({b: split_norms(gen.W.data) for b, gen in net.generators.items()})


# ---------------------------------------------------------------------------
# export


def _eval_json(report: EvalReport) -> dict:
    return {
        "mean": report.mean_accuracy,
        "ci95": report.ci95_halfwidth,
        "n": report.episode_count,
        "seed": report.seed,
        "per_episode_accuracies": report.per_episode_accuracies,
    }


def export_report(report, path, format: Optional[str] = None) -> Path:
    """Write a report as JSON or CSV (format inferred from the suffix if omitted).

    Handles EvalReport, NormReport, postmultiplier_stats output and lists of
    AblationRow.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("json", "csv"):
        raise ValueError(f"unsupported report format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)

    if isinstance(report, EvalReport):
        header = ["mean", "ci95", "n", "seed"]
        rows = [[report.mean_accuracy, report.ci95_halfwidth, report.episode_count, report.seed]]
        payload = _eval_json(report)
    elif isinstance(report, NormReport):
        header, rows = NORM_CSV_HEADER, report.rows()
        payload = [dict(zip(header, r)) for r in rows]
    elif isinstance(report, dict):  # postmultiplier stats
        header = POSTMULT_CSV_HEADER
        rows = []
        payload = {}
        for b, params in sorted(report.items()):
            for name in ("gamma0", "beta0"):
                s = params[name]
                rows.append([b, name, s.min, s.q1, s.median, s.q3, s.max, s.mean])
                payload.setdefault(str(b), {})[name] = asdict(s)
    elif isinstance(report, list) and all(isinstance(r, AblationRow) for r in report):
        header = ABLATION_CSV_HEADER
        rows = [[r.blocks_noised, r.mean_acc, r.ci95, r.n, r.seed] for r in report]
        payload = [asdict(r) for r in report]
    else:
        raise TypeError(f"cannot export {type(report).__name__}")

    if fmt == "json":
        path.write_text(json.dumps(payload, indent=2) + "\n")
    else:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
    return path
