"""Matching Networks and Cross-Modulation Networks.

Both models share the same four-block convolutional embedding. The
cross-modulated variant adds a FiLM generator to blocks 2-4; each generator
reads the pooled activations of a (support, query) pair and modulates the
two branches with swapped argument order.

Block layout: conv -> batch norm -> [FiLM] -> relu -> 2x2 max pool.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import RunningStats, ShapeError, Tensor

logger = logging.getLogger(__name__)

NUM_BLOCKS = 4
MODULATED_BLOCKS = (2, 3, 4)
CHANNELS = 64
NORM_FLOOR = 1e-8

CHECKPOINT_MAGIC = b"XMODNET"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ConvBlock:
    kernels: Tensor
    conv_bias: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    stats: RunningStats


@dataclass
class FiLMGenerator:
    W: Tensor  # [2C, 2C], input rows ordered (self, other)
    b: Tensor  # [2C]
    gamma0: Tensor  # [C]
    beta0: Tensor  # [C]

    @property
    def channels(self) -> int:
        return self.gamma0.shape[0]


class Network:
    """Four-block embedding plus optional FiLM generators for blocks 2-4.

    Without generators this is the Matching Networks baseline.
    """

    def __init__(self, blocks: list[ConvBlock], generators: Optional[dict[int, FiLMGenerator]] = None):
        if len(blocks) != NUM_BLOCKS:
            raise ValueError(f"expected {NUM_BLOCKS} blocks, got {len(blocks)}")
        self.blocks = blocks
        self.generators = dict(generators or {})
        if self.generators and sorted(self.generators) != list(MODULATED_BLOCKS):
            raise ValueError(f"generators must cover blocks {MODULATED_BLOCKS}")

    @property
    def kind(self) -> str:
        return "crossmod" if self.generators else "baseline"

    @property
    def dtype(self):
        return self.blocks[0].kernels.dtype

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.blocks, start=1):
            for attr in ("kernels", "conv_bias", "bn_gamma", "bn_beta"):
                params[f"block{i}.{attr}"] = getattr(blk, attr)
        for i, gen in sorted(self.generators.items()):
            for attr in ("W", "b", "gamma0", "beta0"):
                params[f"gen{i}.{attr}"] = getattr(gen, attr)
        return params

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters().items()}
        for i, blk in enumerate(self.blocks, start=1):
            state[f"block{i}.bn_mean"] = blk.stats.mean
            state[f"block{i}.bn_var"] = blk.stats.var
            state[f"block{i}.bn_updates"] = np.asarray(blk.stats.updates, dtype=np.float64)
        return state

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], dtype=np.float32) -> "Network":
        def get(name):
            if name not in state:
                raise CheckpointError(f"missing tensor {name!r}")
            return np.asarray(state[name], dtype=dtype)

        blocks = []
        for i in range(1, NUM_BLOCKS + 1):
            stats = RunningStats(get(f"block{i}.bn_mean"), get(f"block{i}.bn_var"))
            if f"block{i}.bn_updates" in state:
                stats.updates = int(np.asarray(state[f"block{i}.bn_updates"]))
            blocks.append(
                ConvBlock(
                    *(Tensor(get(f"block{i}.{a}"), requires_grad=True) for a in ("kernels", "conv_bias", "bn_gamma", "bn_beta")),
                    stats=stats,
                )
            )
        generators = {}
        if any(name.startswith("gen") for name in state):
            for i in MODULATED_BLOCKS:
                generators[i] = FiLMGenerator(
                    *(Tensor(get(f"gen{i}.{a}"), requires_grad=True) for a in ("W", "b", "gamma0", "beta0"))
                )
        return cls(blocks, generators)

    def copy(self) -> "Network":
        return Network.from_state_dict({k: np.array(v) for k, v in self.state_dict().items()}, dtype=self.dtype)

    def astype(self, dtype) -> "Network":
        return Network.from_state_dict(self.state_dict(), dtype=dtype)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_network(kind: str = "baseline", seed: int = 0, in_channels: int = 3, dtype=np.float32) -> Network:
    """Fresh network. Post-multipliers start at zero, so a new crossmod net equals its baseline."""
    if kind not in ("baseline", "crossmod"):
        raise ValueError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    blocks = []
    cin = in_channels
    for _ in range(NUM_BLOCKS):
        fan_in = 9 * cin
        blocks.append(
            ConvBlock(
                kernels=_uniform(rng, (3, 3, cin, CHANNELS), fan_in, dtype),
                conv_bias=_uniform(rng, (CHANNELS,), fan_in, dtype),
                bn_gamma=Tensor(np.ones(CHANNELS, dtype=dtype), requires_grad=True),
                bn_beta=Tensor(np.zeros(CHANNELS, dtype=dtype), requires_grad=True),
                stats=RunningStats.fresh(CHANNELS, dtype),
            )
        )
        cin = CHANNELS
    generators = {}
    if kind == "crossmod":
        for i in MODULATED_BLOCKS:
            generators[i] = FiLMGenerator(
                W=_uniform(rng, (2 * CHANNELS, 2 * CHANNELS), 2 * CHANNELS, dtype),
                b=_uniform(rng, (2 * CHANNELS,), 2 * CHANNELS, dtype),
                gamma0=Tensor(np.zeros(CHANNELS, dtype=dtype), requires_grad=True),
                beta0=Tensor(np.zeros(CHANNELS, dtype=dtype), requires_grad=True),
            )
    return Network(blocks, generators)


def embedding_dim(resolution: int) -> int:
    side = resolution
    for _ in range(NUM_BLOCKS):
        side //= 2
    return side * side * CHANNELS


# ---------------------------------------------------------------------------
# building blocks


def _as_images(images, dtype) -> Tensor:
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=dtype))
    if images.ndim != 4:
        raise ShapeError(f"images must be [B,H,W,C], got {images.shape}")
    _, h, w, _ = images.shape
    if h != w or h < 2**NUM_BLOCKS:
        raise ShapeError(f"images must be square and at least {2**NUM_BLOCKS} pixels wide, got {h}x{w}")
    return images


def _conv_bn(block: ConvBlock, x: Tensor, bn_mode: str) -> Tensor:
    x = T.conv2d(x, block.kernels, block.conv_bias)
    return T.batch_norm(x, block.bn_gamma, block.bn_beta, mode=bn_mode, state=block.stats)


def _relu_pool(x: Tensor) -> Tensor:
    return T.max_pool_2x2(T.relu(x), truncate=True)


def embed_baseline(net: Network, images, bn_mode: str = "train") -> Tensor:
    """[B,H,W,3] -> [B,D] embedding through the four unmodulated blocks."""
    x = _as_images(images, net.dtype)
    for block in net.blocks:
        x = _relu_pool(_conv_bn(block, x, bn_mode))
    return T.flatten(x)


def film_generate(gen: FiLMGenerator, x_self: Tensor, x_other: Tensor) -> tuple[Tensor, Tensor]:
    """FiLM parameters for ``x_self`` conditioned on the pair (self, other).

    Both inputs are globally average pooled and passed through relu, joined
    channel-wise in (self, other) order and mapped through ``W``, ``b``.
    Returns (gamma_z, beta_z), each [B, C].
    """
    if x_self.shape != x_other.shape:
        raise ShapeError(f"film_generate inputs differ: {x_self.shape} vs {x_other.shape}")
    c = x_self.shape[-1]
    if gen.W.shape != (2 * c, 2 * c):
        raise ShapeError(f"generator expects {gen.channels} channels, activations have {c}")
    pooled = T.concat_channels(T.relu(T.global_avg_pool(x_self)), T.relu(T.global_avg_pool(x_other)))
    out = T.affine(pooled, gen.W, gen.b)
    return out[:, :c], out[:, c:]


def film_apply(x: Tensor, gamma_z: Tensor, beta_z: Tensor, gamma0: Tensor, beta0: Tensor) -> Tensor:
    """(1 + gamma0 * gamma_z) * x + beta0 * beta_z, per channel, broadcast over H and W."""
    b, _, _, c = x.shape
    if gamma_z.shape != (b, c) or beta_z.shape != (b, c) or gamma0.shape != (c,) or beta0.shape != (c,):
        raise ShapeError("film_apply channel/batch dimensions disagree")
    scale = T.reshape(1.0 + gamma0 * gamma_z, (b, 1, 1, c))
    shift = T.reshape(beta0 * beta_z, (b, 1, 1, c))
    return x * scale + shift


def _post_multipliers(gen: FiLMGenerator, noise) -> tuple[Tensor, Tensor]:
    if noise is None:
        return gen.gamma0, gen.beta0
    g_mult, b_mult = noise
    return gen.gamma0 * Tensor(g_mult, dtype=gen.gamma0.dtype), gen.beta0 * Tensor(b_mult, dtype=gen.beta0.dtype)


def embed_pairs(
    net: Network,
    support_images,
    query_images,
    bn_mode: str = "train",
    noise: Optional[dict] = None,
) -> tuple[Tensor, Tensor]:
    """Cross-modulated embeddings for every (support i, query j) pair.

    Returns ``(f_support, f_query)`` of shape [S*T, D] with pair index
    ``i * T + j``. Block 1 and the block-2 convolution do not depend on the
    pairing and run once per image; each branch is normalized as its own
    batch. ``noise`` optionally maps a block number to per-channel
    multipliers ``(gamma_mult, beta_mult)`` applied to gamma0/beta0.
    """
    if not net.generators:
        raise ValueError("embed_pairs needs a cross-modulation network")
    xs = _as_images(support_images, net.dtype)
    xq = _as_images(query_images, net.dtype)
    n_s, n_q = xs.shape[0], xq.shape[0]
    s_idx = np.repeat(np.arange(n_s), n_q)
    q_idx = np.tile(np.arange(n_q), n_s)
    noise = noise or {}

    xs = _relu_pool(_conv_bn(net.blocks[0], xs, bn_mode))
    xq = _relu_pool(_conv_bn(net.blocks[0], xq, bn_mode))
    for number in MODULATED_BLOCKS:
        block = net.blocks[number - 1]
        a_s = _conv_bn(block, xs, bn_mode)
        a_q = _conv_bn(block, xq, bn_mode)
        if number == MODULATED_BLOCKS[0]:
            a_s = T.take(a_s, s_idx)
            a_q = T.take(a_q, q_idx)
        gen = net.generators[number]
        gamma0, beta0 = _post_multipliers(gen, noise.get(number))
        gs, bs = film_generate(gen, a_s, a_q)
        gq, bq = film_generate(gen, a_q, a_s)
        xs = _relu_pool(film_apply(a_s, gs, bs, gamma0, beta0))
        xq = _relu_pool(film_apply(a_q, gq, bq, gamma0, beta0))
    return T.flatten(xs), T.flatten(xq)


def embed_crossmod(net: Network, support_img, query_img, bn_mode: str = "train") -> tuple[Tensor, Tensor]:
    """Embeddings of a single support/query pair, each of shape [D]."""
    s = np.asarray(support_img.data if isinstance(support_img, Tensor) else support_img)[None]
    q = np.asarray(query_img.data if isinstance(query_img, Tensor) else query_img)[None]
    f_s, f_q = embed_pairs(net, s, q, bn_mode)
    return T.reshape(f_s, (-1,)), T.reshape(f_q, (-1,))


# ---------------------------------------------------------------------------
# matching head


def _query_norm(q: Tensor) -> Tensor:
    sq = T.tsum(q * q, axis=-1)
    if np.any(sq.data < NORM_FLOOR**2):
        logger.warning("query embedding norm below %g; clamping", NORM_FLOOR)
    return T.sqrt(T.clip_min(sq, NORM_FLOOR**2))


def cosine_u(query_emb: Tensor, support_emb: Tensor) -> Tensor:
    """dot(q, s) / ||q||. Only the query norm divides."""
    query_emb, support_emb = T._as_tensor(query_emb), T._as_tensor(support_emb)
    if query_emb.shape != support_emb.shape or query_emb.ndim != 1:
        raise ShapeError("cosine_u expects two vectors of equal length")
    return T.tsum(query_emb * support_emb) / _query_norm(query_emb)


def similarity_matrix(f_query: Tensor, f_support: Tensor) -> Tensor:
    """[T,D] x [S,D] -> [T,S] unnormalized cosine similarities."""
    norms = T.reshape(_query_norm(f_query), (-1, 1))
    return T.matmul(f_query, T.transpose(f_support)) / norms


def matching_probabilities(similarities, support_labels, way: Optional[int] = None) -> Tensor:
    """Softmax over supports, then each support votes for its class.

    ``similarities`` is [S] or [T, S]; the result is [N] or [T, N].
    """
    sims = T._as_tensor(similarities)
    labels = np.asarray(support_labels, dtype=np.intp)
    if sims.shape[-1] != labels.shape[0]:
        raise ShapeError(f"{sims.shape[-1]} similarities for {labels.shape[0]} support labels")
    if way is None:
        way = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= way:
        raise ValueError(f"support labels must lie in 0..{way - 1}")
    onehot = np.zeros((labels.shape[0], way), dtype=sims.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    squeeze = sims.ndim == 1
    if squeeze:
        sims = T.reshape(sims, (1, -1))
    probs = T.matmul(T.softmax(sims), Tensor(onehot))
    return T.reshape(probs, (way,)) if squeeze else probs


def pair_similarities(f_support: Tensor, f_query: Tensor, n_support: int, n_query: int) -> Tensor:
    """cosine_u for pair-ordered rows (index ``i * T + j``), returned as [T, S].

    Accumulates in float64 whatever the embedding precision.
    """
    f_support, f_query = T.cast(f_support, np.float64), T.cast(f_query, np.float64)
    sims = T.tsum(f_query * f_support, axis=-1) / _query_norm(f_query)
    return T.transpose(T.reshape(sims, (n_support, n_query)))


def classify_episode(net: Network, episode, bn_mode: str = "train", noise: Optional[dict] = None) -> Tensor:
    """Per-query class distributions [T, N] for an episode.

    The baseline embeds every image once; cross-modulation embeds every
    (support, query) pair. Both score pairs with the same reduction, so a
    cross-modulated net with zero post-multipliers reproduces the baseline
    bit for bit.
    """
    s_img = episode.support_images(net.dtype)
    q_img = episode.query_images(net.dtype)
    n_s, n_q = s_img.shape[0], q_img.shape[0]
    if net.generators:
        f_s, f_q = embed_pairs(net, s_img, q_img, bn_mode, noise=noise)
    else:
        if noise:
            raise ValueError("no modulation to perturb in a baseline network")
        f_s = T.take(embed_baseline(net, s_img, bn_mode), np.repeat(np.arange(n_s), n_q))
        f_q = T.take(embed_baseline(net, q_img, bn_mode), np.tile(np.arange(n_q), n_s))
    out_dtype = np.result_type(f_s.dtype, f_q.dtype)
    sims = pair_similarities(f_s, f_q, n_s, n_q)
    probs = matching_probabilities(sims, episode.support_labels, way=episode.way)
    return T.cast(probs, out_dtype)


# ---------------------------------------------------------------------------
# checkpoint container


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Named-tensor container: magic, version, then (name, rank, extents, float32 LE data) records."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not an XMODNET container")
    pos = len(CHECKPOINT_MAGIC)

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (version,) = unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (name_len,) = unpack("<I")
        if pos + name_len > len(raw):
            raise CheckpointError(f"{path}: truncated container")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = unpack("<I")
        shape = unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return out


def save_checkpoint(net: Network, path) -> None:
    write_tensors(path, net.state_dict())


def load_checkpoint(path, dtype=np.float32) -> Network:
    return Network.from_state_dict(read_tensors(path), dtype=dtype)
