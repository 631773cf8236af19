"""Tiny decoder-only base LM with residual capture and additive steering.

The residual stream at layer ``l`` is the input of block ``l`` (``h_0`` is the
embedding sum). A steering intervention adds ``factor * vector`` to that
stream at every position, so blocks ``l..n_layers-1`` see the steered state.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import conceptlab as cl
from .errors import ConfigError, LengthError, NumericError, ShapeError, TrainingError
from .numerics import Adam, Tensor, clip_grad_norm, count_flops, get_tape, make_rng, no_grad, ops

log = logging.getLogger(__name__)


@dataclass
class LmConfig:
    vocab_size: int = cl.VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 128
    positional: str = "learned"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.positional != "learned":
            raise ConfigError(f"unsupported positional scheme {self.positional!r}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len) < 1:
            raise ConfigError("LmConfig sizes must be positive")

    @property
    def default_layer(self) -> int:
        return self.n_layers // 2

    def to_dict(self):
        return asdict(self)


@dataclass
class InterventionSpec:
    """Add ``factor * vector`` to the layer-``layer`` residual stream at all positions.

    ``vector`` is a (d,) or per-example (B, d) Tensor/array.
    """

    layer: int
    factor: float
    vector: object
    positions: str = "all"

    def __post_init__(self):
        if self.positions != "all":
            raise ConfigError("interventions always apply at all token positions")


@dataclass
class ResidualCapture:
    layer: int
    acts: np.ndarray  # |x| x d_model


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    max_new: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ConfigError(f"decode mode must be greedy or sample, got {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise ConfigError("temperature must be > 0 for sampling")


def block_param_names(i: int) -> list[str]:
    p = f"blocks.{i}."
    return [p + n for n in ("ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o",
                            "ln2.g", "ln2.b", "mlp.w_in", "mlp.b_in", "mlp.w_out", "mlp.b_out")]


def init_block_params(rng, d, d_ff, n_layers, prefix, dtype=np.float32) -> dict:
    std = 0.02
    proj_std = std / math.sqrt(2 * n_layers)
    P = {}
    P[prefix + "ln1.g"] = np.ones(d)
    P[prefix + "ln1.b"] = np.zeros(d)
    P[prefix + "attn.w_qkv"] = rng.normal(0, std, (d, 3 * d))
    P[prefix + "attn.b_qkv"] = np.zeros(3 * d)
    P[prefix + "attn.w_o"] = rng.normal(0, proj_std, (d, d))
    P[prefix + "attn.b_o"] = np.zeros(d)
    P[prefix + "ln2.g"] = np.ones(d)
    P[prefix + "ln2.b"] = np.zeros(d)
    P[prefix + "mlp.w_in"] = rng.normal(0, std, (d, d_ff))
    P[prefix + "mlp.b_in"] = np.zeros(d_ff)
    P[prefix + "mlp.w_out"] = rng.normal(0, proj_std, (d_ff, d))
    P[prefix + "mlp.b_out"] = np.zeros(d)
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in P.items()}


def self_attention(P, prefix, x, n_heads, causal=True, key_mask=None, return_weights=False):
    """Multi-head self-attention sublayer on an already-normalized (B, T, d) input."""
    bsz, t, d = x.shape
    dh = d // n_heads
    qkv = ops.linear(x, P[prefix + "w_qkv"], P[prefix + "b_qkv"])
    qkv = qkv.reshape(bsz, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    res = ops.attention(q, k, v, causal=causal, key_mask=key_mask, return_weights=return_weights)
    out, w = (res if return_weights else (res, None))
    out = out.transpose(0, 2, 1, 3).reshape(bsz, t, d)
    out = ops.linear(out, P[prefix + "w_o"], P[prefix + "b_o"])
    return (out, w) if return_weights else out


def mlp(P, prefix, x):
    h = ops.gelu(ops.linear(x, P[prefix + "w_in"], P[prefix + "b_in"]))
    return ops.linear(h, P[prefix + "w_out"], P[prefix + "b_out"])


def decoder_block(P, prefix, h, n_heads, eps, causal=True, key_mask=None):
    a = ops.layer_norm(h, P[prefix + "ln1.g"], P[prefix + "ln1.b"], eps)
    h = h + self_attention(P, prefix + "attn.", a, n_heads, causal=causal, key_mask=key_mask)
    m = ops.layer_norm(h, P[prefix + "ln2.g"], P[prefix + "ln2.b"], eps)
    return h + mlp(P, prefix + "mlp.", m)


class TinyLM:
    def __init__(self, config: LmConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: LmConfig, seed: int = 0, dtype=np.float32) -> "TinyLM":
        rng = make_rng(seed, "tinylm-init")
        d = config.d_model
        P = {
            "tok_emb": Tensor(rng.normal(0, 0.02, (config.vocab_size, d)).astype(dtype), requires_grad=True, name="tok_emb"),
            "pos_emb": Tensor(rng.normal(0, 0.01, (config.max_seq_len, d)).astype(dtype), requires_grad=True, name="pos_emb"),
        }
        for i in range(config.n_layers):
            P.update(init_block_params(rng, d, config.d_ff, config.n_layers, f"blocks.{i}.", dtype))
        P["ln_f.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True, name="ln_f.g")
        P["ln_f.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name="ln_f.b")
        return cls(config, P)

    # -- parameter management -------------------------------------------------
    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    @classmethod
    def from_state_dict(cls, config: LmConfig, state: dict, frozen=True) -> "TinyLM":
        params = {k: Tensor(np.array(v), requires_grad=not frozen, name=k) for k, v in state.items()}
        return cls(config, params)

    def soft_vector(self, s, x) -> np.ndarray:
        """Residual signal ``(e_F + e_P) @ soft.proj[task(x)]`` used for prefix-free concept lines."""
        if "soft.proj" not in self.params:
            raise KeyError("model was not pretrained with soft concept lines")
        e = self.params["tok_emb"].data[np.asarray(s, dtype=np.int64)].sum(axis=0)
        return e @ self.params["soft.proj"].data[cl.task_index(x)]

    def astype(self, dtype) -> "TinyLM":
        return TinyLM(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                                    for k, v in self.params.items()})

    # -- forward ------------------------------------------------------------
    def _check_tokens(self, tokens):
        toks = np.asarray(tokens, dtype=np.int64)
        single = toks.ndim == 1
        if single:
            toks = toks[None, :]
        if toks.ndim != 2:
            raise ShapeError("tokens must be 1-D or 2-D")
        if toks.shape[1] > self.config.max_seq_len:
            raise LengthError(f"sequence length {toks.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if toks.shape[1] == 0:
            raise LengthError("empty token sequence")
        if toks.min() < 0 or toks.max() >= self.config.vocab_size:
            raise IndexError("token id out of vocabulary")
        return toks, single

    def _check_intervention(self, iv: InterventionSpec, bsz: int):
        if not 0 <= iv.layer < self.config.n_layers:
            raise IndexError(f"intervention layer {iv.layer} outside [0, {self.config.n_layers})")
        vec = iv.vector if isinstance(iv.vector, Tensor) else Tensor(np.asarray(iv.vector), dtype=self.params["tok_emb"].dtype)
        if vec.shape[-1] != self.config.d_model or vec.ndim not in (1, 2) or (vec.ndim == 2 and vec.shape[0] not in (1, bsz)):
            raise ShapeError(f"steering vector shape {vec.shape} incompatible with d_model {self.config.d_model}")
        return vec

    def hidden_states(self, tokens, intervention: InterventionSpec | None = None, capture=(), stop_at=None):
        """Run the blocks; returns (final residual, {layer: residual Tensor}).

        ``stop_at`` returns right after capturing that layer, skipping the rest.
        """
        toks, _ = self._check_tokens(tokens)
        cfg = self.config
        P = self.params
        bsz, t = toks.shape
        vec = None
        if intervention is not None:
            vec = self._check_intervention(intervention, bsz)
            delta = vec * float(intervention.factor)
            delta = delta.reshape(1, 1, cfg.d_model) if delta.ndim == 1 else delta.reshape(delta.shape[0], 1, cfg.d_model)
        h = ops.embedding(toks, P["tok_emb"]) + P["pos_emb"][:t]
        caps = {}
        for i in range(cfg.n_layers):
            if vec is not None and i == intervention.layer:
                h = h + delta
            if i in capture:
                caps[i] = h
            if stop_at is not None and i == stop_at:
                return h, caps
            h = decoder_block(P, f"blocks.{i}.", h, cfg.n_heads, cfg.ln_eps)
        return h, caps

    def logits_from_hidden(self, h):
        h = ops.layer_norm(h, self.params["ln_f.g"], self.params["ln_f.b"], self.config.ln_eps)
        return ops.matmul(h, self.params["tok_emb"].transpose())

    def forward(self, tokens, intervention: InterventionSpec | None = None):
        """Logits (T, V) for a 1-D sequence or (B, T, V) for a batch."""
        _, single = self._check_tokens(tokens)
        h, _ = self.hidden_states(tokens, intervention)
        logits = self.logits_from_hidden(h)
        return logits[0] if single else logits

    __call__ = forward

    def capture_residual(self, tokens, layer: int) -> ResidualCapture:
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} outside [0, {self.config.n_layers})")
        with no_grad():
            _, caps = self.hidden_states(np.asarray(tokens)[None, :], capture=(layer,), stop_at=layer)
        return ResidualCapture(layer, caps[layer].data[0].copy())

    def capture_batch(self, tokens, layer: int) -> np.ndarray:
        """Clean residuals (B, T, d) at ``layer`` for a padded batch."""
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} outside [0, {self.config.n_layers})")
        with no_grad():
            _, caps = self.hidden_states(tokens, capture=(layer,), stop_at=layer)
        return caps[layer].data

    # -- decoding -------------------------------------------------------------
    def generate(self, prompts, intervention: InterventionSpec | None = None, decode: DecodeConfig | None = None):
        """Continue each prompt; returns continuations without the EOS terminator.

        ``prompts`` is one sequence or a list of sequences (batched decoding;
        a (B, d) intervention vector steers each prompt with its own row).
        """
        decode = decode or DecodeConfig()
        if len(prompts) == 0:
            raise LengthError("prompt must be nonempty")
        single = np.isscalar(prompts[0])
        batch = [list(prompts)] if single else [list(p) for p in prompts]
        if any(len(p) == 0 for p in batch):
            raise LengthError("prompt must be nonempty")
        if decode.max_new <= 0:
            return [] if single else [[] for _ in batch]
        bsz = len(batch)
        lengths = np.array([len(p) for p in batch])
        cap = min(self.config.max_seq_len, int(lengths.max()) + decode.max_new)
        toks = np.full((bsz, cap), cl.PAD, dtype=np.int64)
        for i, p in enumerate(batch):
            toks[i, : len(p)] = p
        outs = [[] for _ in batch]
        done = lengths >= cap
        rng = make_rng(decode.seed, "generate") if decode.mode == "sample" else None
        rows = np.arange(bsz)
        with no_grad():
            for _ in range(decode.max_new):
                if done.all():
                    break
                t = int(lengths[~done].max())
                logits = self.forward(toks[:, :t], intervention).data
                last = logits[rows, np.minimum(lengths, t) - 1].astype(np.float64)
                if decode.mode == "greedy":
                    nxt = last.argmax(axis=1)
                else:
                    z = last / decode.temperature
                    z -= z.max(axis=1, keepdims=True)
                    p = np.exp(z)
                    p /= p.sum(axis=1, keepdims=True)
                    u = rng.random(bsz)
                    nxt = np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), p.shape[1] - 1)
                for i in np.flatnonzero(~done):
                    tok = int(nxt[i])
                    if tok == cl.EOS:
                        done[i] = True
                        continue
                    outs[i].append(tok)
                    toks[i, lengths[i]] = tok
                    lengths[i] += 1
                    if lengths[i] >= cap:
                        done[i] = True
        return outs[0] if single else outs

    # -- scoring ----------------------------------------------------------------
    def sequence_nll(self, seqs, start):
        """Mean next-token NLL of ``seqs[i][start[i]:]`` given its prefix, per sequence."""
        seqs = [list(s) for s in seqs]
        t = max(len(s) for s in seqs)
        toks = np.full((len(seqs), t), cl.PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            toks[i, : len(s)] = s
        with no_grad():
            logits = self.forward(toks).data.astype(np.float64)
        logp = logits - logits.max(axis=-1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        out = np.empty(len(seqs))
        for i, s in enumerate(seqs):
            pos = np.arange(max(start[i], 1), len(s))
            if pos.size == 0:
                raise LengthError("nothing to score")
            out[i] = -logp[i, pos - 1, toks[i, pos]].mean()
        return out

    def perplexity(self, tokens, start: int = 1) -> float:
        """exp(mean NLL) of ``tokens[start:]`` under the unsteered model."""
        tokens = list(tokens)
        if len(tokens) < 2:
            raise LengthError("perplexity needs at least 2 tokens")
        return float(np.exp(self.sequence_nll([tokens], [start])[0]))


# -- pretraining ---------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    warmup: int = 100
    min_lr_ratio: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 100


@dataclass
class TrainTrace:
    losses: list = field(default_factory=list)
    flops: list = field(default_factory=list)
    wall: list = field(default_factory=list)


def lr_schedule(step, total, base, warmup, min_ratio):
    if step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def pretrain(corpus: cl.Corpus, config: LmConfig, steps: int | None = None, seed: int = 0,
             train_cfg: PretrainConfig | None = None, init: TinyLM | None = None, callback=None):
    """Train the base LM on answer positions of ``corpus``; returns (frozen LM, trace)."""
    tc = train_cfg or PretrainConfig()
    steps = tc.steps if steps is None else steps
    lm = init if init is not None else TinyLM.init(config, seed)
    trace = TrainTrace()
    if steps <= 0:
        return lm.freeze(), trace
    toks, mask = corpus.as_arrays()
    if toks.max() >= config.vocab_size:
        raise ConfigError("corpus token outside vocabulary")
    if toks.shape[1] > config.max_seq_len:
        raise LengthError("corpus line longer than max_seq_len")
    lengths = (toks != cl.PAD).sum(axis=1)
    soft = corpus.soft_array()
    has_soft = bool((soft[:, 0] >= 0).any())
    if has_soft and "soft.proj" not in lm.params:
        srng = make_rng(seed, "soft-proj")
        d = config.d_model
        shape = (len(cl.TASKS), d, d)
        lm.params["soft.proj"] = Tensor(srng.normal(0, 1.0, shape).astype(lm.params["tok_emb"].dtype),
                                        requires_grad=True, name="soft.proj")
    rng = make_rng(seed, "pretrain-batches")
    params = lm.parameters()
    opt = Adam(params, lr=tc.lr, betas=(0.9, 0.98), weight_decay=tc.weight_decay)
    last_good = lm.state_dict()
    t0 = time.perf_counter()
    for step in range(steps):
        idx = rng.integers(0, len(toks), size=tc.batch_size)
        t = int(lengths[idx].max())
        batch, bmask = toks[idx, :t], mask[idx, :t]
        opt.lr = lr_schedule(step, steps, tc.lr, tc.warmup, tc.min_lr_ratio)
        get_tape().clear()
        opt.zero_grad()
        with count_flops() as fc:
            iv = _soft_intervention(lm, soft[idx]) if has_soft else None
            logits = lm.forward(batch[:, :-1], iv)
            loss = ops.cross_entropy(logits, batch[:, 1:], bmask[:, :-1])
            loss.backward()
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingError(f"pretraining diverged at step {step}", checkpoint=last_good, step=step)
        clip_grad_norm(params, tc.grad_clip)
        opt.step()
        trace.losses.append(lv)
        trace.flops.append(fc.total)
        trace.wall.append(time.perf_counter() - t0)
        if tc.log_every and step % tc.log_every == 0:
            log.info("pretrain step %d loss %.4f flops %.3g wall %.1fs", step, lv, fc.total, trace.wall[-1])
            last_good = lm.state_dict()
        if callback is not None:
            callback(step, lv)
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise TrainingError("non-finite parameters after pretraining", checkpoint=last_good, step=steps)
    return lm.freeze(), trace


def _soft_intervention(lm: TinyLM, sidx):
    """Per-line signal from (F, P, task index) rows; rows with F < 0 get zero."""
    on = sidx[:, 0] >= 0
    if not on.any():
        return None
    P = lm.params
    b, d = len(sidx), lm.config.d_model
    e = ops.embedding(np.where(on[:, None], sidx[:, :2], 0), P["tok_emb"]).sum(axis=1)
    proj = P["soft.proj"].reshape(len(cl.TASKS), d * d)
    w = ops.embedding(np.where(on, sidx[:, 2], 0), proj).reshape(b, d, d)
    u = ops.matmul(e.reshape(b, 1, d), w).reshape(b, d) * on[:, None].astype(e.dtype)
    return InterventionSpec(lm.config.default_layer, 1.0, u)


def task_accuracy(lm: TinyLM, prompts, max_new: int = 16) -> float:
    """Exact-match rate of unsteered greedy answers against the task solvers."""
    outs = lm.generate([list(x) for x in prompts], decode=DecodeConfig(max_new=max_new))
    hits = [out == cl.task_for_prompt(x).solve(x) for x, out in zip(prompts, outs)]
    return float(np.mean(hits))


def instructed_accuracy(lm: TinyLM, tasks, max_new: int = 24) -> float:
    """Exact-match rate when the concept instruction is spelled out in the prompt."""
    prompts = [list(st.concept.instruction) + list(st.x) for st in tasks]
    outs = lm.generate(prompts, decode=DecodeConfig(max_new=max_new))
    return float(np.mean([tuple(o) == tuple(st.y_label) for o, st in zip(outs, tasks)]))
