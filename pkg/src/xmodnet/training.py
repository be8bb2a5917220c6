"""Episodic training with Adam, plus confidence-interval evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import tensor as T
from .data import DatasetSplit, Episode, sample_episode
from .model import (
    MODULATED_BLOCKS,
    Network,
    classify_episode,
    init_network,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CI_Z = 1.96

# episode rng streams, so train and eval draws never coincide
TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass
class TrainConfig:
    way: int = 5
    shot: int = 1
    queries_per_class_train: Optional[int] = None  # None: 15 for baseline, 5 for crossmod
    lr_initial: float = 0.001
    lr_halving_period: int = 100_000
    l1_factor: float = 0.001
    max_episodes: int = 300_000
    eval_every: int = 5000
    val_episodes: int = 200
    val_queries_per_class: int = 15
    seed: int = 0
    model_kind: str = "baseline"
    bn_mode: str = "eval"  # batch-norm mode used for validation
    workers: int = 1
    precision: int = 32

    def __post_init__(self):
        if self.model_kind not in ("baseline", "crossmod"):
            raise ValueError(f"model_kind must be baseline or crossmod, got {self.model_kind!r}")
        for name in ("way", "shot", "lr_halving_period", "max_episodes", "val_episodes", "val_queries_per_class", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if self.l1_factor < 0:
            raise ValueError("l1_factor must be non-negative")
        if self.eval_every < 0:
            raise ValueError("eval_every must be non-negative")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.bn_mode not in ("eval", "batch"):
            raise ValueError("bn_mode must be eval or batch")
        if self.queries_per_class_train is None:
            self.queries_per_class_train = 5 if self.model_kind == "crossmod" else 15
        if self.queries_per_class_train <= 0:
            raise ValueError("queries_per_class_train must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95_halfwidth: float
    episode_count: int
    per_episode_accuracies: list[float] = field(repr=False)
    seed: int

    @classmethod
    def from_accuracies(cls, accuracies, seed: int) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        n = acc.size
        return cls(
            mean_accuracy=float(acc.mean()) if n else 0.0,
            ci95_halfwidth=ci95_halfwidth(acc),
            episode_count=int(n),
            per_episode_accuracies=[float(a) for a in acc],
            seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return f"{100 * self.mean_accuracy:.2f} ± {100 * self.ci95_halfwidth:.2f}% (n={self.episode_count})"


def ci95_halfwidth(accuracies) -> float:
    """1.96 * sample standard deviation / sqrt(n)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return 0.0
    return float(CI_Z * acc.std(ddof=1) / math.sqrt(acc.size))


# ---------------------------------------------------------------------------
# loss and optimizer


def l1_penalty(net: Network) -> Optional[Tensor]:
    terms = [T.tsum(T.tabs(g.gamma0)) + T.tsum(T.tabs(g.beta0)) for g in net.generators.values()]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def nll_from_probs(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    picked = probs[np.arange(labels.shape[0]), labels]
    return T.mean(-T.log(T.clip_min(picked, LOG_FLOOR)))


def episode_loss(
    net: Network,
    episode: Episode,
    l1_factor: float = 0.0,
    bn_mode: str = "train",
    noise: Optional[dict] = None,
) -> Tensor:
    """Mean query negative log-likelihood plus the L1 penalty on the post-multipliers."""
    probs = classify_episode(net, episode, bn_mode=bn_mode, noise=noise)
    loss = nll_from_probs(probs, episode.query_labels)
    penalty = l1_penalty(net)
    if penalty is not None and l1_factor:
        loss = loss + l1_factor * penalty
    return loss


def lr_schedule(episode_index: int, config: TrainConfig) -> float:
    """Initial rate halved every ``lr_halving_period`` episodes."""
    if episode_index < 0:
        raise ValueError("episode_index must be non-negative")
    return config.lr_initial * 0.5 ** (episode_index // config.lr_halving_period)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.asarray(self.step, dtype=np.float64)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], dtype=np.float32) -> "AdamState":
        state = cls(step=int(np.asarray(tensors.get("adam.step", 0))))
        for key, arr in tensors.items():
            if key.startswith("m."):
                state.m[key[2:]] = np.asarray(arr, dtype=dtype)
            elif key.startswith("v."):
                state.v[key[2:]] = np.asarray(arr, dtype=dtype)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; gradients are cleared afterwards."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
        p.grad = None


# ---------------------------------------------------------------------------
# evaluation

Classifier = Union[Network, Callable[[Episode], np.ndarray]]


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def episode_accuracy(probs: np.ndarray, labels) -> float:
    pred = np.argmax(probs, axis=1)  # first index wins ties
    return float(np.mean(pred == np.asarray(labels)))


def evaluate(
    model: Classifier,
    split: DatasetSplit,
    episodes: int = 1000,
    way: int = 5,
    shot: int = 1,
    queries_per_class: int = 15,
    seed: int = 0,
    bn_mode: str = "eval",
    workers: int = 1,
    perturb: Optional[Callable[[int], Optional[dict]]] = None,
) -> EvalReport:
    """Mean per-episode accuracy with a 95% confidence half-width.

    ``model`` is a network or any callable mapping an episode to a [T, N]
    probability array. ``perturb(i)`` may return a noise dict for episode i.
    Episode i is fully determined by (seed, i), so the report does not depend
    on ``workers``.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")

    def run(i: int) -> float:
        ep = sample_episode(split, way, shot, queries_per_class, episode_rng(seed, EVAL_STREAM, i))
        if isinstance(model, Network):
            noise = perturb(i) if perturb is not None else None
            with T.no_grad():
                probs = classify_episode(model, ep, bn_mode=bn_mode, noise=noise).data
        else:
            probs = np.asarray(model(ep))
        return episode_accuracy(probs, ep.query_labels)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run, range(episodes)))
    else:
        accs = [run(i) for i in range(episodes)]
    return EvalReport.from_accuracies(accs, seed)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    net: Network
    best_net: Network
    log: list[dict]
    best_val_accuracy: Optional[float]
    optimizer: AdamState


def _log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=False)


def save_optimizer(state: AdamState, path, best_val: Optional[float] = None) -> None:
    tensors = state.to_tensors()
    if best_val is not None:
        tensors["meta.best_val_acc"] = np.asarray(best_val, dtype=np.float64)
    write_tensors(path, tensors)


def train(
    config: TrainConfig,
    train_split: DatasetSplit,
    val_split: Optional[DatasetSplit] = None,
    output_dir=None,
    resume: bool = False,
    net: Optional[Network] = None,
    on_episode: Optional[Callable[[int, float], None]] = None,
    stop: Optional[Callable[[int, Network], bool]] = None,
) -> TrainResult:
    """Sample episode, loss, backprop, Adam step; repeat.

    With ``output_dir`` the log (``train_log.jsonl``), ``last.ckpt``,
    ``best.ckpt``, ``final.ckpt`` and ``optimizer.ckpt`` are written there.
    ``resume`` continues from ``last.ckpt`` + ``optimizer.ckpt``; since
    every episode's sampling depends only on (seed, episode), a resumed run
    reproduces an uninterrupted one. ``stop(episode, net)`` returning True
    ends training early after that episode.
    """
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = config.dtype
    best_val: Optional[float] = None
    opt = AdamState()
    log: list[dict] = []

    if resume:
        if out is None or not (out / "last.ckpt").is_file():
            raise FileNotFoundError("resume requested but no last.ckpt in output directory")
        net = load_checkpoint(out / "last.ckpt", dtype=dtype)
        opt_tensors = read_tensors(out / "optimizer.ckpt")
        opt = AdamState.from_tensors(opt_tensors, dtype=dtype)
        if "meta.best_val_acc" in opt_tensors:
            best_val = float(opt_tensors["meta.best_val_acc"])
        log_path = out / "train_log.jsonl"
        if log_path.is_file():
            kept = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
            log = [r for r in kept if r["episode"] < opt.step]
            log_path.write_text("".join(_log_line(r) + "\n" for r in log))
    elif net is None:
        net = init_network(config.model_kind, seed=config.seed, dtype=dtype)
    if net.kind != config.model_kind:
        raise ValueError(f"network is {net.kind}, config asks for {config.model_kind}")

    best_net = net.copy()
    log_fh = None
    if out is not None:
        log_fh = (out / "train_log.jsonl").open("a" if resume else "w")

    params = net.named_parameters()
    start = opt.step
    t0 = time.time()
    try:
        for episode_index in range(start, config.max_episodes):
            rng = episode_rng(config.seed, TRAIN_STREAM, episode_index)
            ep = sample_episode(train_split, config.way, config.shot, config.queries_per_class_train, rng)
            loss = episode_loss(net, ep, config.l1_factor, bn_mode="train")
            T.backward(loss)
            lr = lr_schedule(episode_index, config)
            adam_step(params, opt, lr)

            record = {"episode": episode_index, "loss": float(loss.data), "lr": lr}
            done = episode_index + 1
            if val_split is not None and config.eval_every and (done % config.eval_every == 0 or done == config.max_episodes):
                report = evaluate(
                    net,
                    val_split,
                    episodes=config.val_episodes,
                    way=config.way,
                    shot=config.shot,
                    queries_per_class=config.val_queries_per_class,
                    seed=config.seed,
                    bn_mode=config.bn_mode,
                    workers=config.workers,
                )
                record["val_acc"] = report.mean_accuracy
                if best_val is None or report.mean_accuracy > best_val:
                    best_val = report.mean_accuracy
                    best_net = net.copy()
                    if out is not None:
                        save_checkpoint(best_net, out / "best.ckpt")
                logger.info("episode %d: val %s (%.0fs)", done, report.summary(), time.time() - t0)
            log.append(record)
            if log_fh is not None:
                log_fh.write(_log_line(record) + "\n")
                if config.eval_every and done % config.eval_every == 0:
                    log_fh.flush()
                    save_checkpoint(net, out / "last.ckpt")
                    save_optimizer(opt, out / "optimizer.ckpt", best_val)
            if on_episode is not None:
                on_episode(episode_index, record["loss"])
            if stop is not None and stop(episode_index, net):
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_val is None:
        best_net = net.copy()
    if out is not None:
        save_checkpoint(net, out / "final.ckpt")
        save_checkpoint(net, out / "last.ckpt")
        save_optimizer(opt, out / "optimizer.ckpt", best_val)
        if best_val is None:
            save_checkpoint(net, out / "best.ckpt")
    return TrainResult(net=net, best_net=best_net, log=log, best_val_accuracy=best_val, optimizer=opt)


def postmultiplier_abs_mean(net: Network) -> float:
    """Mean |gamma0| over all modulated blocks (0 for a baseline)."""
    if not net.generators:
        return 0.0
    return float(np.mean([np.abs(net.generators[i].gamma0.data).mean() for i in MODULATED_BLOCKS]))
