"""Comparison methods: ReFT-r1 dictionary learning, DiffMean, prompt steering."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import conceptlab as cl
from .errors import ConfigError, DataError, LengthError, TrainingError
from .numerics import Adam, Tensor, clip_grad_norm, count_flops, get_tape, make_rng, no_grad, ops

log = logging.getLogger(__name__)


@dataclass
class ReftR1Params:
    w: np.ndarray
    lam: float = 0.05
    k: int = 8

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float32)
        if self.k < 1:
            raise ConfigError("top-k size must be >= 1")
        if self.lam < 0:
            raise ConfigError("sparsity weight must be >= 0")


def reft_latent(h, w) -> float:
    """Detection latent ``ReLU(h . w)`` for one residual vector."""
    w = np.asarray(w, dtype=np.float64)
    if not np.linalg.norm(w) > 0:
        raise DataError("direction must be nonzero")
    return float(max(0.0, float(np.dot(np.asarray(h, dtype=np.float64), w))))


def _topk_mask(lat: np.ndarray, valid: np.ndarray, k: int):
    """Boolean (B, T) mask of each row's top-k valid latents, and the per-row k actually used."""
    scores = np.where(valid, lat, -np.inf)
    k_eff = np.minimum(k, valid.sum(axis=1))
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(lat.shape[0])[:, None]
    ranks[rows, order] = np.arange(lat.shape[1])[None, :]
    return (ranks < k_eff[:, None]) & valid, k_eff


def topk_latents(acts, valid, direction, k: int):
    """Top-k mean latent magnitude (B,) and the L1 mass of the remaining latents (B,).

    ``acts`` (B, T, d) are clean residuals, ``valid`` (B, T) marks real
    positions, ``direction`` is a (d,) or (B, d) Tensor. Latents are
    ``ReLU(h_t . direction)``; rows with fewer than k positions use all of them.
    """
    acts = np.asarray(acts)
    valid = np.asarray(valid, dtype=bool)
    if np.any(valid.sum(axis=1) == 0):
        raise LengthError("every row needs at least one valid position")
    a = Tensor(acts, dtype=direction.dtype)
    if direction.ndim == 1:
        lat = ops.relu(ops.matmul(a, direction.reshape(-1, 1)).reshape(acts.shape[:2]))
    else:
        lat = ops.relu(ops.matmul(a, direction.reshape(direction.shape[0], -1, 1)).reshape(acts.shape[:2]))
    top, k_eff = _topk_mask(lat.data, valid, k)
    top_f = top.astype(lat.dtype)
    rest_f = (valid & ~top).astype(lat.dtype)
    mag = (lat * top_f).sum(axis=1) / k_eff.astype(lat.dtype)
    rest = (lat * rest_f).sum(axis=1)
    return mag, rest


def topk_latent_magnitude(acts, valid, direction, k: int):
    return topk_latents(acts, valid, direction, k)[0]


def reft_steer_vector(prompt_acts, params: ReftR1Params):
    """Test-time vector ``(mean of top-k latents over the prompt) * w``; k is clamped to |x|."""
    from .hypernet import SteeringVector

    acts = np.asarray(prompt_acts, dtype=np.float64)
    w = params.w.astype(np.float64)
    lat = np.maximum(acts @ w, 0.0)
    k = min(params.k, len(lat))
    mag = np.sort(lat)[::-1][:k].sum() / k
    return SteeringVector((mag * w).astype(np.float32), False, "reft-r1")


def reft_objective(base, w, toks, mask, layer: int, lam: float, k: int, alpha: float = 1.0):
    """Joint objective: label NLL under ``mag * w_hat`` steering plus lam * off-top-k L1.

    Returns (total, lm_loss, penalty) Tensors. ``mag`` is the per-sequence
    top-k mean latent over the clean capture of the full sequence.
    """
    from .hypernet import steering_loss

    if lam < 0:
        raise ConfigError("sparsity weight must be >= 0")
    seq = toks[:, :-1]
    acts = base.capture_batch(seq, layer)
    valid = seq != cl.PAD
    w_hat = ops.l2_normalize(w)
    mag, rest = topk_latents(acts, valid, w_hat, k)
    vecs = mag.reshape(-1, 1) * w_hat.reshape(1, -1)
    lm_loss = steering_loss(base, vecs, toks, mask, layer, alpha)
    penalty = rest.mean()
    if lam == 0:
        return lm_loss, lm_loss, penalty
    return lm_loss + penalty * lam, lm_loss, penalty


@dataclass
class ReftTrainConfig:
    steps: int = 300
    batch_size: int = 24
    lr: float = 1e-2
    lam: float = 0.05
    k: int = 8
    alpha: float = 1.0
    layer: int | None = None
    log_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"sparsity weight must be >= 0, got {self.lam}")
        if self.k < 1:
            raise ConfigError("top-k size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")


@dataclass
class ReftTrace:
    losses: list = field(default_factory=list)
    lm_losses: list = field(default_factory=list)
    penalties: list = field(default_factory=list)
    flops: list = field(default_factory=list)
    wall: list = field(default_factory=list)


def reft_train(tasks, base, cfg: ReftTrainConfig | None = None, **overrides):
    """Train one ReFT-r1 direction on a single concept's tasks; returns (params, trace)."""
    from .hypernet import label_batch

    cfg = cfg or ReftTrainConfig()
    if overrides:
        cfg = ReftTrainConfig(**{**cfg.__dict__, **overrides})
    if not tasks:
        raise DataError("training set is empty")
    if len({t.concept_id for t in tasks}) != 1:
        raise DataError("ReFT-r1 trains one direction per concept")
    layer = base.config.default_layer if cfg.layer is None else cfg.layer
    rng = make_rng(cfg.seed, "reft", tasks[0].concept_id)
    d = base.config.d_model
    w = Tensor(rng.normal(0, 1.0 / np.sqrt(d), d).astype(np.float32), requires_grad=True, name="reft.w")
    opt = Adam([w], lr=cfg.lr)
    trace = ReftTrace()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(tasks), size=min(cfg.batch_size, len(tasks)))
        toks, mask = label_batch([tasks[i] for i in idx])
        get_tape().clear()
        opt.zero_grad()
        with count_flops() as fc:
            total, lm_loss, pen = reft_objective(base, w, toks, mask, layer, cfg.lam, cfg.k, cfg.alpha)
            total.backward()
        lv = total.item()
        if not np.isfinite(lv):
            raise TrainingError(f"ReFT-r1 training diverged at step {step}", checkpoint={"reft.w": w.data.copy()}, step=step)
        clip_grad_norm([w], 1.0)
        opt.step()
        trace.losses.append(lv)
        trace.lm_losses.append(lm_loss.item())
        trace.penalties.append(pen.item())
        trace.flops.append(fc.total)
        trace.wall.append(time.perf_counter() - t0)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("reft %s step %d loss %.4f", tasks[0].concept_id, step, lv)
    unit = w.data.astype(np.float64)
    unit = (unit / np.linalg.norm(unit)).astype(np.float32)
    return ReftR1Params(unit, cfg.lam, cfg.k), trace


def diffmean(pos_acts, neg_acts):
    """``mean(pos) - mean(neg)`` over two sets of d-vectors."""
    from .hypernet import SteeringVector

    pos = np.asarray(pos_acts, dtype=np.float64)
    neg = np.asarray(neg_acts, dtype=np.float64)
    if pos.size == 0 or neg.size == 0 or len(pos) == 0 or len(neg) == 0:
        raise DataError("diffmean needs nonempty positive and negative sets")
    if pos.ndim != 2 or neg.ndim != 2 or pos.shape[1] != neg.shape[1]:
        raise DataError("activation sets must be (n, d) with matching d")
    return SteeringVector(pos.mean(axis=0) - neg.mean(axis=0), False, "diffmean")


def answer_activations(base, tasks, labels, layer: int) -> np.ndarray:
    """Per-example mean clean residual over the answer span of ``x + label``."""
    from .hypernet import _pad

    seqs = [list(t.x) + list(lab) for t, lab in zip(tasks, labels)]
    acts = base.capture_batch(_pad(seqs), layer)
    out = np.empty((len(seqs), acts.shape[-1]), dtype=np.float64)
    for i, (t, s) in enumerate(zip(tasks, seqs)):
        out[i] = acts[i, len(t.x) - 1: len(s)].mean(axis=0)
    return out


def diffmean_vector(tasks, base, layer: int | None = None):
    """DiffMean direction for one concept: gold labels versus rule-violating answers."""
    if not tasks:
        raise DataError("diffmean needs training tasks")
    layer = base.config.default_layer if layer is None else layer
    with no_grad():
        pos = answer_activations(base, tasks, [t.y_label for t in tasks], layer)
        neg = answer_activations(base, tasks, [cl.negative_label(t) for t in tasks], layer)
    return diffmean(pos, neg)


def prompt_template(s) -> list[int]:
    return [cl.INSTR] + [int(t) for t in s]


def prompt_steer(s, x, max_seq_len: int | None = None) -> list[int]:
    """Prepend the fixed instruction template for ``s`` to the base prompt ``x``."""
    s = [int(t) for t in s]
    x = [int(t) for t in x]
    if not s or not x:
        raise LengthError("prompt steering needs nonempty s and x")
    out = prompt_template(s) + x
    if max_seq_len is not None and len(out) > max_seq_len:
        raise LengthError(f"steered prompt length {len(out)} exceeds {max_seq_len}")
    return out
