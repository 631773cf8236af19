"""Transformer hypernetwork that emits steering vectors for a frozen base LM.

The network reads a steering prompt ``s`` (and, depending on the variant, the
base prompt or the base LM's residual stream at the steering layer), runs a
small decoder stack, and maps the final-token state through a two-layer MLP
head to a ``d_model`` vector that is added to the base LM residual stream.

Variants:

* ``NoContext`` encodes ``s`` alone, so the vector depends on ``s`` only.
* ``InContext`` encodes the concatenation ``s + x``.
* ``CrossAttention`` encodes ``s`` and, inside every block, cross-attends
  from the hypernetwork stream (queries) to the base LM's clean residual
  stream over ``x`` at the steering layer (keys and values).
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import conceptlab as cl
from .baselines import topk_latent_magnitude
from .errors import ConfigError, DataError, LengthError, NumericError, ShapeError, TrainingError
from .numerics import Adam, Tensor, clip_grad_norm, count_flops, get_tape, make_rng, no_grad, ops
from .tinylm import (
    InterventionSpec,
    TinyLM,
    block_param_names,
    init_block_params,
    lr_schedule,
    mlp,
    self_attention,
)

log = logging.getLogger(__name__)

VARIANTS = ("NoContext", "InContext", "CrossAttention")
INITS = ("random", "pretrained-from-base")


@dataclass
class HypernetConfig:
    variant: str = "CrossAttention"
    n_blocks: int = 2
    n_heads: int = 4
    n_cross_heads: int = 4
    d_model: int = 128
    unit_norm_output: bool = False
    init: str = "pretrained-from-base"
    d_ff: int | None = None  # defaults to 4 * d_model
    vocab_size: int = cl.VOCAB_SIZE
    max_seq_len: int = 64
    ln_eps: float = 1e-5
    topk: int = 8  # latent top-k for unit-norm magnitude inference

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}; expected one of {INITS}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.n_blocks < 1 or self.d_model < 1 or self.max_seq_len < 1:
            raise ConfigError("hypernetwork sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.variant == "CrossAttention":
            if self.n_cross_heads < 1:
                raise ConfigError("CrossAttention requires n_cross_heads >= 1")
            if self.d_model % self.n_cross_heads:
                raise ConfigError("d_model not divisible by n_cross_heads")
            if self.unit_norm_output:
                raise ConfigError("unit-norm output is only available for NoContext/InContext")
        if self.topk < 1:
            raise ConfigError("topk must be >= 1")

    @property
    def has_cross(self) -> bool:
        return self.variant == "CrossAttention"

    def to_dict(self):
        return asdict(self)


@dataclass
class SteeringVector:
    values: np.ndarray
    normalized: bool = False
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise ShapeError("steering vector must be 1-D")
        if self.normalized and abs(float(np.linalg.norm(self.values.astype(np.float64))) - 1.0) >= 1e-5:
            raise NumericError("vector flagged normalized does not have unit norm")


@dataclass
class HyperInputs:
    """A padded batch of hypernetwork inputs.

    ``tokens`` holds the encoded sequence (``s`` or ``s + x``) right-padded;
    ``ctx`` holds base-LM residuals over ``x`` (CrossAttention only).
    """

    tokens: np.ndarray
    lengths: np.ndarray
    ctx: np.ndarray | None = None
    ctx_mask: np.ndarray | None = None

    def __len__(self):
        return len(self.tokens)


def _pad(rows, pad=cl.PAD):
    t = max(len(r) for r in rows)
    out = np.full((len(rows), t), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def cross_param_names(i: int) -> list[str]:
    p = f"blocks.{i}.xattn."
    return [p + n for n in ("ln_q.g", "ln_q.b", "ln_kv.g", "ln_kv.b", "w_q", "b_q", "w_kv", "b_kv", "w_o", "b_o")]


def _init_cross(rng, d, n_blocks, prefix, dtype=np.float32) -> dict:
    std = 0.02
    P = {
        prefix + "ln_q.g": np.ones(d), prefix + "ln_q.b": np.zeros(d),
        prefix + "ln_kv.g": np.ones(d), prefix + "ln_kv.b": np.zeros(d),
        prefix + "w_q": rng.normal(0, std, (d, d)), prefix + "b_q": np.zeros(d),
        prefix + "w_kv": rng.normal(0, std, (d, 2 * d)), prefix + "b_kv": np.zeros(2 * d),
        prefix + "w_o": rng.normal(0, std / math.sqrt(2 * n_blocks), (d, d)), prefix + "b_o": np.zeros(d),
    }
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in P.items()}


def cross_attention(P, prefix, xq, ctx, n_heads, key_mask=None, return_weights=False):
    """Multi-head attention with queries from ``xq`` (B, T, d) and keys/values from ``ctx`` (B, S, d)."""
    bsz, t, d = xq.shape
    if ctx.shape[-1] != d or ctx.shape[0] != bsz:
        raise ShapeError(f"cross-attention stream shapes {xq.shape} and {ctx.shape} disagree")
    s = ctx.shape[1]
    dh = d // n_heads
    q = ops.linear(xq, P[prefix + "w_q"], P[prefix + "b_q"]).reshape(bsz, t, n_heads, dh).transpose(0, 2, 1, 3)
    kv = ops.linear(ctx, P[prefix + "w_kv"], P[prefix + "b_kv"]).reshape(bsz, s, 2, n_heads, dh).transpose(2, 0, 3, 1, 4)
    res = ops.attention(q, kv[0], kv[1], causal=False, key_mask=key_mask, return_weights=return_weights)
    out, w = res if return_weights else (res, None)
    out = ops.linear(out.transpose(0, 2, 1, 3).reshape(bsz, t, d), P[prefix + "w_o"], P[prefix + "b_o"])
    return (out, w) if return_weights else out


def cross_attention_block(P, prefix, h, ctx, n_heads, n_cross_heads, eps, ctx_mask=None, weights=None):
    """Self-attention, cross-attention, then feed-forward; each pre-norm with its own residual.

    When ``weights`` is a list, the (self, cross) attention arrays are appended to it.
    """
    if ctx.shape[-1] != h.shape[-1]:
        raise ShapeError(f"base activations width {ctx.shape[-1]} != hypernetwork width {h.shape[-1]}")
    want = weights is not None
    a = ops.layer_norm(h, P[prefix + "ln1.g"], P[prefix + "ln1.b"], eps)
    sa = self_attention(P, prefix + "attn.", a, n_heads, causal=True, return_weights=want)
    if want:
        sa, w_self = sa
    h = h + sa
    xp = prefix + "xattn."
    q = ops.layer_norm(h, P[xp + "ln_q.g"], P[xp + "ln_q.b"], eps)
    kv = ops.layer_norm(ctx, P[xp + "ln_kv.g"], P[xp + "ln_kv.b"], eps)
    ca = cross_attention(P, xp, q, kv, n_cross_heads, key_mask=ctx_mask, return_weights=want)
    if want:
        ca, w_cross = ca
        weights.append((w_self, w_cross))
    h = h + ca
    m = ops.layer_norm(h, P[prefix + "ln2.g"], P[prefix + "ln2.b"], eps)
    return h + mlp(P, prefix + "mlp.", m)


class Hypernet:
    def __init__(self, config: HypernetConfig, params: dict):
        self.config = config
        self.params = params

    # -- construction ---------------------------------------------------------
    @classmethod
    def build(cls, config: HypernetConfig, base: TinyLM | None = None, seed: int = 0) -> "Hypernet":
        """Initialize parameters; ``pretrained-from-base`` copies embeddings and the first blocks of ``base``."""
        c = config
        rng = make_rng(seed, "hypernet-init", c.variant)
        d = c.d_model
        P = {
            "tok_emb": Tensor(rng.normal(0, 0.02, (c.vocab_size, d)).astype(np.float32), requires_grad=True, name="tok_emb"),
            "pos_emb": Tensor(rng.normal(0, 0.01, (c.max_seq_len, d)).astype(np.float32), requires_grad=True, name="pos_emb"),
        }
        for i in range(c.n_blocks):
            P.update(init_block_params(rng, d, c.d_ff, c.n_blocks, f"blocks.{i}."))
            if c.has_cross:
                P.update(_init_cross(rng, d, c.n_blocks, f"blocks.{i}.xattn."))
        P["ln_f.g"] = Tensor(np.ones(d, np.float32), requires_grad=True, name="ln_f.g")
        P["ln_f.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True, name="ln_f.b")
        P["head.w1"] = Tensor(rng.normal(0, 0.02, (d, 4 * d)).astype(np.float32), requires_grad=True, name="head.w1")
        P["head.b1"] = Tensor(np.zeros(4 * d, np.float32), requires_grad=True, name="head.b1")
        # zero final layer makes the untrained head a no-op steer; a unit-norm
        # head cannot normalize zero, so it starts from a small random layer
        w2 = rng.normal(0, 0.02, (4 * d, d)) if c.unit_norm_output else np.zeros((4 * d, d))
        P["head.w2"] = Tensor(w2.astype(np.float32), requires_grad=True, name="head.w2")
        P["head.b2"] = Tensor(np.zeros(d, np.float32), requires_grad=True, name="head.b2")
        if c.init == "pretrained-from-base":
            if base is None:
                raise ConfigError("pretrained-from-base init needs the base LM")
            _copy_from_base(P, c, base)
        return cls(config, P)

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    @classmethod
    def from_state_dict(cls, config: HypernetConfig, state: dict) -> "Hypernet":
        return cls(config, {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in state.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # -- inputs ---------------------------------------------------------------
    def make_inputs(self, pairs, base: TinyLM | None = None, layer: int | None = None, cache=None) -> HyperInputs:
        """Build a batch from ``(s, x)`` pairs; CrossAttention captures ``x`` on ``base``."""
        c = self.config
        if not pairs:
            raise DataError("empty input batch")
        if any(len(s) == 0 for s, _ in pairs):
            raise LengthError("steering prompt must be nonempty")
        if c.variant == "InContext":
            if any(x is None for _, x in pairs):
                raise TypeError("InContext variant requires the base prompt x")
            rows = [list(s) + list(x) for s, x in pairs]
        else:
            rows = [list(s) for s, _ in pairs]
        lengths = np.array([len(r) for r in rows])
        if lengths.max() > c.max_seq_len:
            raise LengthError(f"hypernetwork input length {lengths.max()} exceeds {c.max_seq_len}")
        inp = HyperInputs(_pad(rows), lengths)
        if c.has_cross:
            if base is None or any(x is None for _, x in pairs):
                raise TypeError("CrossAttention variant requires the base prompt and base LM activations")
            layer = base.config.default_layer if layer is None else layer
            xs = [tuple(x) for _, x in pairs]
            cache = cache if cache is not None else ContextCache(base, layer)
            inp.ctx, inp.ctx_mask = cache.batch(xs)
        return inp

    # -- forward ----------------------------------------------------------------
    def encode(self, inp: HyperInputs, attention_weights: list | None = None):
        """Final residual stream (B, T, d) plus per-block states (list of arrays)."""
        c = self.config
        P = self.params
        toks = inp.tokens
        if toks.shape[1] > c.max_seq_len:
            raise LengthError(f"hypernetwork input length {toks.shape[1]} exceeds {c.max_seq_len}")
        h = ops.embedding(toks, P["tok_emb"]) + P["pos_emb"][: toks.shape[1]]
        states = [h]
        ctx = None
        if c.has_cross:
            if inp.ctx is None:
                raise TypeError("CrossAttention variant requires base LM activations")
            ctx = Tensor(inp.ctx, dtype=np.float32)
        for i in range(c.n_blocks):
            pre = f"blocks.{i}."
            if c.has_cross:
                h = cross_attention_block(P, pre, h, ctx, c.n_heads, c.n_cross_heads, c.ln_eps,
                                          ctx_mask=inp.ctx_mask, weights=attention_weights)
            else:
                a = ops.layer_norm(h, P[pre + "ln1.g"], P[pre + "ln1.b"], c.ln_eps)
                sa = self_attention(P, pre + "attn.", a, c.n_heads, causal=True,
                                    return_weights=attention_weights is not None)
                if attention_weights is not None:
                    sa, w = sa
                    attention_weights.append((w, None))
                h = h + sa
                m = ops.layer_norm(h, P[pre + "ln2.g"], P[pre + "ln2.b"], c.ln_eps)
                h = h + mlp(P, pre + "mlp.", m)
            states.append(h)
        return h, states

    def final_state(self, inp: HyperInputs, attention_weights: list | None = None):
        """Post-final-norm state of the last real token of each row, (B, d)."""
        h, _ = self.encode(inp, attention_weights)
        last = h[np.arange(len(inp)), inp.lengths - 1]
        return ops.layer_norm(last, self.params["ln_f.g"], self.params["ln_f.b"], self.config.ln_eps)

    def steering_head(self, h):
        P = self.params
        z = ops.gelu(ops.linear(h, P["head.w1"], P["head.b1"]))
        out = ops.linear(z, P["head.w2"], P["head.b2"])
        if self.config.unit_norm_output:
            out = ops.l2_normalize(out)
        return out

    def vectors(self, inp: HyperInputs):
        """Steering vectors (B, d) as a differentiable Tensor."""
        return self.steering_head(self.final_state(inp))

    def encode_steering_prompt(self, s, x=None, base_acts=None) -> list:
        """Residual states of every layer for one input: list of (T, d) arrays."""
        inp = self._single_inputs(s, x, base_acts)
        with no_grad():
            _, states = self.encode(inp)
        return [st.data[0].copy() for st in states]

    def generate_vector(self, s, x=None, base_acts=None, provenance: str | None = None) -> SteeringVector:
        """Steering vector for one steering prompt (and base prompt / activations as required)."""
        inp = self._single_inputs(s, x, base_acts)
        with no_grad():
            v = self.vectors(inp).data[0].copy()
        return SteeringVector(v, self.config.unit_norm_output, provenance or f"hypernet:{self.config.variant}")

    def attention_maps(self, s, x=None, base_acts=None) -> list[dict]:
        """Per-block self- and cross-attention weights (heads x queries x keys) for one input."""
        inp = self._single_inputs(s, x, base_acts)
        weights = []
        with no_grad():
            self.final_state(inp, attention_weights=weights)
        out = []
        for w_self, w_cross in weights:
            out.append({"self": w_self[0].copy(), "cross": None if w_cross is None else w_cross[0].copy()})
        return out

    def _single_inputs(self, s, x, base_acts) -> HyperInputs:
        c = self.config
        s = [int(t) for t in s]
        if not s:
            raise LengthError("steering prompt must be nonempty")
        if c.variant == "InContext":
            if x is None:
                raise TypeError("InContext variant requires the base prompt x")
            row = s + [int(t) for t in x]
        else:
            row = s
        if len(row) > c.max_seq_len:
            raise LengthError(f"hypernetwork input length {len(row)} exceeds {c.max_seq_len}")
        inp = HyperInputs(np.asarray([row], dtype=np.int64), np.array([len(row)]))
        if c.has_cross:
            if base_acts is None:
                raise TypeError("CrossAttention variant requires base LM activations")
            acts = np.asarray(getattr(base_acts, "acts", base_acts), dtype=np.float32)
            if acts.ndim != 2 or acts.shape[1] != c.d_model:
                raise ShapeError(f"base activations shape {acts.shape} incompatible with d_model {c.d_model}")
            inp.ctx = acts[None]
            inp.ctx_mask = np.ones((1, acts.shape[0]), dtype=bool)
        return inp


def _copy_from_base(P, c: HypernetConfig, base: TinyLM):
    bc = base.config
    if bc.d_model != c.d_model or bc.d_ff != c.d_ff or bc.n_heads != c.n_heads:
        raise ConfigError("pretrained-from-base init needs matching d_model, d_ff and n_heads")
    if bc.vocab_size != c.vocab_size or bc.max_seq_len < c.max_seq_len:
        raise ConfigError("pretrained-from-base init needs a compatible vocabulary and position table")
    B = base.params
    P["tok_emb"].data = B["tok_emb"].data.copy()
    P["pos_emb"].data = B["pos_emb"].data[: c.max_seq_len].copy()
    for i in range(min(c.n_blocks, bc.n_layers)):
        for name in block_param_names(i):
            P[name].data = B[name].data.copy()
    P["ln_f.g"].data = B["ln_f.g"].data.copy()
    P["ln_f.b"].data = B["ln_f.b"].data.copy()


class ContextCache:
    """Memoized clean residual captures of base prompts at one layer."""

    def __init__(self, base: TinyLM, layer: int):
        if not 0 <= layer < base.config.n_layers:
            raise IndexError(f"layer {layer} outside [0, {base.config.n_layers})")
        self.base = base
        self.layer = layer
        self._acts: dict = {}

    def get(self, x) -> np.ndarray:
        x = tuple(int(t) for t in x)
        if x not in self._acts:
            self.fill([x])
        return self._acts[x]

    def fill(self, xs, chunk: int = 256):
        todo = sorted({tuple(int(t) for t in x) for x in xs} - set(self._acts))
        for i in range(0, len(todo), chunk):
            part = todo[i: i + chunk]
            acts = self.base.capture_batch(_pad(part), self.layer)
            for j, x in enumerate(part):
                self._acts[x] = acts[j, : len(x)].copy()

    def batch(self, xs):
        self.fill(xs)
        s = max(len(x) for x in xs)
        d = self.base.config.d_model
        ctx = np.zeros((len(xs), s, d), dtype=np.float32)
        mask = np.zeros((len(xs), s), dtype=bool)
        for i, x in enumerate(xs):
            a = self._acts[tuple(int(t) for t in x)]
            ctx[i, : len(a)] = a
            mask[i, : len(a)] = True
        return ctx, mask


# -- steering loss ---------------------------------------------------------------

def label_batch(tasks):
    """Tokens ``x + y_label + EOS`` (B, T) and the mask of positions that predict the label."""
    seqs = [list(t.x) + list(t.y_label) + [cl.EOS] for t in tasks]
    toks = _pad(seqs)
    mask = np.zeros((len(seqs), toks.shape[1] - 1), dtype=bool)
    for i, (t, s) in enumerate(zip(tasks, seqs)):
        mask[i, len(t.x) - 1: len(s) - 1] = True
    return toks, mask


def steering_loss(base: TinyLM, vecs, toks, mask, layer: int, alpha: float = 1.0):
    """Mean label NLL of the base LM steered by per-example ``vecs`` (B, d) at ``layer``."""
    logits = base.forward(toks[:, :-1], InterventionSpec(layer, alpha, vecs))
    return ops.cross_entropy(logits, toks[:, 1:], mask)


def reconstruction_loss(delta, target):
    """``1 - cos(delta, target) + ||delta - target||^2`` per row, averaged over the batch."""
    if isinstance(target, np.ndarray):
        target = Tensor(target, dtype=delta.dtype)
    cos = ops.cosine_similarity(delta, target)
    diff = delta - target
    sq = (diff * diff).sum(axis=-1)
    return (1.0 - cos + sq).mean()


# -- training ---------------------------------------------------------------------

@dataclass
class HyperTrainConfig:
    steps: int = 800
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 40
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    alpha: float = 1.0
    layer: int | None = None
    log_every: int = 100
    eval_every: int = 0
    stop_loss: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    flops: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)

    def steps_to_target(self, target: float) -> int | None:
        """First evaluated step count whose held-in eval loss is <= ``target``."""
        for s, v in zip(self.eval_steps, self.eval_losses):
            if v <= target:
                return s
        return None


def _applied_vectors(hyper: Hypernet, inp: HyperInputs, base: TinyLM, layer: int, toks=None):
    """Vectors added to the base stream; unit-norm heads get a top-k latent magnitude."""
    vecs = hyper.vectors(inp)
    if not hyper.config.unit_norm_output:
        return vecs
    seq = toks if toks is not None else None
    if seq is None:
        raise ValueError("unit-norm vectors need the sequence to infer a magnitude")
    acts = base.capture_batch(seq, layer)
    valid = seq != cl.PAD
    mag = topk_latent_magnitude(acts, valid, vecs, hyper.config.topk)
    return vecs * mag.reshape(-1, 1)


def batch_inputs(hyper: Hypernet, tasks, base: TinyLM, cache: ContextCache | None, layer: int) -> HyperInputs:
    return hyper.make_inputs([(t.s, t.x) for t in tasks], base=base, layer=layer, cache=cache)


def eval_loss(hyper: Hypernet, base: TinyLM, tasks, layer: int | None = None, alpha: float = 1.0,
              cache: ContextCache | None = None, chunk: int = 128) -> float:
    """Mean steered label NLL over ``tasks`` (token-weighted), no gradient."""
    layer = base.config.default_layer if layer is None else layer
    if hyper.config.has_cross and cache is None:
        cache = ContextCache(base, layer)
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(tasks), chunk):
            part = tasks[i: i + chunk]
            toks, mask = label_batch(part)
            inp = batch_inputs(hyper, part, base, cache, layer)
            vecs = _applied_vectors(hyper, inp, base, layer, toks[:, :-1])
            loss = steering_loss(base, vecs, toks, mask, layer, alpha).item()
            n = int(mask.sum())
            total += loss * n
            count += n
    return total / count


def train_e2e(tasks, base: TinyLM, config: HypernetConfig | Hypernet, train_cfg: HyperTrainConfig | None = None,
              eval_tasks=None, callback=None, seed: int | None = None):
    """Train on the steered label NLL of the frozen base LM; returns (hypernet, TrainResult).

    Only hypernetwork parameters are updated. When ``eval_tasks`` and
    ``train_cfg.eval_every`` are given, the held-in eval loss is recorded every
    ``eval_every`` steps (used for FLOPs-to-target accounting); with
    ``stop_loss`` set, training ends at the first evaluation at or below it.
    """
    tc = train_cfg or HyperTrainConfig()
    seed = tc.seed if seed is None else seed
    if not tasks:
        raise DataError("training set is empty")
    if not base.frozen:
        raise ConfigError("base LM must be frozen before hypernetwork training")
    hyper = config if isinstance(config, Hypernet) else Hypernet.build(config, base, seed)
    if hyper.config.d_model != base.config.d_model:
        raise ShapeError("hypernetwork d_model must equal base LM d_model")
    layer = base.config.default_layer if tc.layer is None else tc.layer
    cache = ContextCache(base, layer) if hyper.config.has_cross else None
    if cache is not None:
        cache.fill([t.x for t in tasks])
    params = hyper.parameters()
    opt = Adam(params, lr=tc.lr, weight_decay=tc.weight_decay)
    rng = make_rng(seed, "hypernet-batches")
    result = TrainResult()
    base_sum = base.checksum()
    last_good = hyper.state_dict()
    flops_total = 0
    t0 = time.perf_counter()

    def record_eval(step):
        if eval_tasks and tc.eval_every:
            result.eval_steps.append(step)
            result.eval_losses.append(eval_loss(hyper, base, eval_tasks, layer, tc.alpha, cache))

    record_eval(0)
    for step in range(tc.steps):
        idx = rng.integers(0, len(tasks), size=min(tc.batch_size, len(tasks)))
        batch = [tasks[i] for i in idx]
        toks, mask = label_batch(batch)
        opt.lr = lr_schedule(step, tc.steps, tc.lr, tc.warmup, tc.min_lr_ratio)
        get_tape().clear()
        opt.zero_grad()
        with count_flops() as fc:
            inp = batch_inputs(hyper, batch, base, cache, layer)
            vecs = _applied_vectors(hyper, inp, base, layer, toks[:, :-1])
            loss = steering_loss(base, vecs, toks, mask, layer, tc.alpha)
            loss.backward()
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingError(f"hypernetwork training diverged at step {step}", checkpoint=last_good, step=step)
        clip_grad_norm(params, tc.grad_clip)
        opt.step()
        flops_total += fc.total
        result.losses.append(lv)
        result.flops.append(fc.total)
        result.wall.append(time.perf_counter() - t0)
        if tc.log_every and step % tc.log_every == 0:
            log.info("hypernet step %d loss %.4f flops %.3g wall %.1fs", step, lv, fc.total, result.wall[-1])
            last_good = hyper.state_dict()
        if tc.eval_every and (step + 1) % tc.eval_every == 0:
            record_eval(step + 1)
            # the schedule still spans tc.steps, so stopping early does not change the trajectory
            if tc.stop_loss is not None and result.eval_losses and result.eval_losses[-1] <= tc.stop_loss:
                break
        if callback is not None:
            callback(step, lv)
    if base.checksum() != base_sum:
        raise TrainingError("base LM parameters changed during hypernetwork training", checkpoint=last_good, step=tc.steps)
    return hyper, result


def train_reconstruction(pairs, config: HypernetConfig | Hypernet, train_cfg: HyperTrainConfig | None = None,
                         base: TinyLM | None = None, seed: int | None = None):
    """Fit a NoContext hypernetwork to target vectors; returns (hypernet, TrainResult, mean cosine).

    ``pairs`` is a list of ``(s, target)`` with ``target`` a nonzero d-vector.
    """
    tc = train_cfg or HyperTrainConfig()
    seed = tc.seed if seed is None else seed
    if not pairs:
        raise DataError("no reconstruction targets")
    hyper = config if isinstance(config, Hypernet) else Hypernet.build(config, base, seed)
    if hyper.config.variant != "NoContext":
        raise ConfigError("reconstruction training is defined for the NoContext variant")
    targets = np.stack([np.asarray(t, dtype=np.float32) for _, t in pairs])
    if targets.shape[1] != hyper.config.d_model:
        raise ShapeError("target vectors must have d_model entries")
    if np.any(np.linalg.norm(targets, axis=1) == 0):
        raise DataError("zero-norm target vector")
    inp_all = hyper.make_inputs([(s, None) for s, _ in pairs])
    params = hyper.parameters()
    opt = Adam(params, lr=tc.lr, weight_decay=tc.weight_decay)
    rng = make_rng(seed, "recon-batches")
    result = TrainResult()
    t0 = time.perf_counter()
    for step in range(tc.steps):
        idx = rng.integers(0, len(pairs), size=min(tc.batch_size, len(pairs)))
        inp = HyperInputs(inp_all.tokens[idx], inp_all.lengths[idx])
        opt.lr = lr_schedule(step, tc.steps, tc.lr, tc.warmup, tc.min_lr_ratio)
        get_tape().clear()
        opt.zero_grad()
        with count_flops() as fc:
            loss = reconstruction_loss(hyper.vectors(inp), targets[idx])
            loss.backward()
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingError(f"reconstruction training diverged at step {step}", checkpoint=hyper.state_dict(), step=step)
        clip_grad_norm(params, tc.grad_clip)
        opt.step()
        result.losses.append(lv)
        result.flops.append(fc.total)
        result.wall.append(time.perf_counter() - t0)
        if tc.log_every and step % tc.log_every == 0:
            log.info("reconstruction step %d loss %.4f", step, lv)
    with no_grad():
        pred = hyper.vectors(inp_all).data.astype(np.float64)
    t64 = targets.astype(np.float64)
    cos = (pred * t64).sum(1) / (np.linalg.norm(pred, axis=1) * np.linalg.norm(t64, axis=1))
    return hyper, result, float(cos.mean())


def depth_lr(base_lr: float, n_blocks: int) -> float:
    """Learning rate rescaled for hypernetwork depth: ``base_lr * sqrt(20 / n)``."""
    if n_blocks < 1:
        raise ConfigError("n_blocks must be >= 1")
    return base_lr * math.sqrt(20.0 / n_blocks)
