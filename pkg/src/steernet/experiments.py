"""Experiment orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import conceptlab as cl
from . import evalkit as ek
from .archive import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import FormatError
from .hypernet import (Hypernet, HypernetConfig, HyperTrainConfig, train_e2e, train_reconstruction)
from .tinylm import LmConfig, PretrainConfig, TinyLM, pretrain

log = logging.getLogger(__name__)


# -- base LM ------------------------------------------------------------------------

def lm_config(cfg: ExperimentConfig) -> LmConfig:
    m = cfg.model
    return LmConfig(d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads, d_ff=m.d_ff, max_seq_len=m.max_seq_len)


def base_fingerprint(cfg: ExperimentConfig) -> str:
    key = {"model": lm_config(cfg).to_dict(), "pretrain": cfg.pretrain.__dict__, "seed": cfg.seed}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def pretrain_base(cfg: ExperimentConfig) -> TinyLM:
    p = cfg.pretrain
    corpus = cl.gen_corpus(cfg.seed, p.n_lines, instructed_fraction=p.instructed_fraction, soft_fraction=p.soft_fraction)
    tc = PretrainConfig(steps=p.steps, batch_size=p.batch_size, lr=p.lr)
    lm, _ = pretrain(corpus, lm_config(cfg), seed=cfg.seed, train_cfg=tc)
    return lm


def save_base(lm: TinyLM, path, cfg: ExperimentConfig | None = None) -> Path:
    meta = {"kind": "base", "config": lm.config.to_dict()}
    if cfg is not None:
        meta["fingerprint"] = base_fingerprint(cfg)
    return save_checkpoint(lm.state_dict(), path, meta)


def load_base(path) -> TinyLM:
    state, meta = load_checkpoint(path, with_meta=True)
    if meta.get("kind") != "base":
        raise FormatError(f"{path} is not a base LM checkpoint")
    return TinyLM.from_state_dict(LmConfig(**meta["config"]), state)


def cache_dir() -> Path:
    return Path(os.environ.get("STEERNET_CACHE", Path.home() / ".cache" / "steernet"))


def cached_base(cfg: ExperimentConfig) -> TinyLM:
    """Pretrain once per (model, pretrain, seed) configuration and reuse from disk."""
    path = cache_dir() / f"base-{base_fingerprint(cfg)}.hstr"
    if path.exists():
        return load_base(path)
    log.info("pretraining base LM (cache miss: %s)", path)
    lm = pretrain_base(cfg)
    save_base(lm, path, cfg)
    return lm


# -- data ---------------------------------------------------------------------------

@dataclass
class Split:
    held_in: list
    held_out: list


@dataclass
class Data:
    train: list
    eval_in: list
    eval_out: list
    concepts: list = field(default_factory=list)


def concept_split(cfg: ExperimentConfig) -> Split:
    d = cfg.data
    order = [c for c in cl.default_concept_order(d.seed) if cl.get_concept(c).family in d.families]
    hin, hout = cl.split_heldout(order, d.heldout_fraction, seed=d.seed)
    hin_set, hout_set = set(hin), set(hout)
    # keep the interleaved order so prefixes stay family-balanced
    return Split([c for c in order if c in hin_set], [c for c in order if c in hout_set])


def make_data(cfg: ExperimentConfig, n_concepts: int | None = None) -> Data:
    d = cfg.data
    split = concept_split(cfg)
    n = d.n_concepts if n_concepts is None else n_concepts
    m = cl.gen_dataset(split.held_in, n_concepts=n, n_train=d.n_train, n_eval=d.n_eval, seed=d.seed)
    ho = cl.gen_dataset(split.held_out, n_train=0, n_eval=d.n_eval, seed=d.seed + 1, eval_split="eval-held-out")
    return Data(m.train, m.eval, ho.eval, split.held_in[:n])


def make_judge(cfg: ExperimentConfig, base: TinyLM, data: Data) -> ek.Judge:
    return ek.Judge.calibrated(base, [t.x for t in data.eval_in])


# -- hypernetworks ------------------------------------------------------------------

def hypernet_config(cfg: ExperimentConfig, **overrides) -> HypernetConfig:
    h = cfg.hypernet
    kw = dict(variant=h.variant, n_blocks=h.n_blocks, n_heads=h.n_heads, n_cross_heads=h.n_cross_heads,
              d_model=cfg.model.d_model, d_ff=cfg.model.d_ff, unit_norm_output=h.unit_norm_output, init=h.init,
              max_seq_len=min(64, cfg.model.max_seq_len))
    kw.update(overrides)
    return HypernetConfig(**kw)


def train_hypernet(cfg: ExperimentConfig, base: TinyLM, data: Data, seed: int | None = None, lr: float | None = None,
                   eval_every: int | None = None, stop_loss: float | None = None, **overrides):
    hc = hypernet_config(cfg, **overrides)
    seed = cfg.seed if seed is None else seed
    tc = HyperTrainConfig(steps=cfg.train_steps(len(data.train)), batch_size=cfg.train.batch_size,
                          lr=cfg.train_lr(hc.n_blocks) if lr is None else lr, alpha=cfg.train.alpha, layer=cfg.layer,
                          eval_every=cfg.train.eval_every if eval_every is None else eval_every, seed=seed,
                          stop_loss=stop_loss, log_every=100)
    return train_e2e(data.train, base, hc, tc, eval_tasks=data.eval_in if tc.eval_every else None, seed=seed)


def save_hypernet(hyper: Hypernet, path, extra: dict | None = None) -> Path:
    meta = {"kind": "hypernet", "config": hyper.config.to_dict(), **(extra or {})}
    return save_checkpoint(hyper.state_dict(), path, meta)


def load_hypernet(path) -> Hypernet:
    state, meta = load_checkpoint(path, with_meta=True)
    if meta.get("kind") != "hypernet":
        raise FormatError(f"{path} is not a hypernetwork checkpoint")
    return Hypernet.from_state_dict(HypernetConfig(**meta["config"]), state)


def hypernet_method(hyper: Hypernet, base: TinyLM, cfg: ExperimentConfig) -> ek.HypernetMethod:
    return ek.HypernetMethod(hyper, base, cfg.layer)


# -- baselines ----------------------------------------------------------------------

def train_reft_store(cfg: ExperimentConfig, base: TinyLM, tasks) -> dict:
    b = cfg.baseline
    rc = bl.ReftTrainConfig(steps=b.steps, batch_size=b.batch_size, lr=b.lr, lam=b.lam, k=b.k, layer=cfg.layer, seed=cfg.seed)
    by_c: dict = {}
    for t in tasks:
        by_c.setdefault(t.concept_id, []).append(t)
    return {cid: bl.reft_train(ts, base, rc)[0] for cid, ts in sorted(by_c.items())}


def train_diffmean_store(cfg: ExperimentConfig, base: TinyLM, tasks) -> dict:
    by_c: dict = {}
    for t in tasks:
        by_c.setdefault(t.concept_id, []).append(t)
    return {cid: bl.diffmean_vector(ts, base, cfg.layer).values for cid, ts in sorted(by_c.items())}


def save_vector_store(store: dict, path, method: str, cfg: ExperimentConfig) -> Path:
    if method == "reft-r1":
        tensors = {cid: p.w for cid, p in store.items()}
        meta = {"kind": "vectors", "method": method, "lam": cfg.baseline.lam, "k": cfg.baseline.k}
    else:
        tensors = {cid: np.asarray(v, dtype=np.float32) for cid, v in store.items()}
        meta = {"kind": "vectors", "method": method}
    return save_checkpoint(tensors, path, meta)


def load_vector_method(path, base: TinyLM, cfg: ExperimentConfig) -> ek.SteeringMethod:
    tensors, meta = load_checkpoint(path, with_meta=True)
    if meta.get("kind") != "vectors":
        raise FormatError(f"{path} is not a vector store")
    if meta["method"] == "reft-r1":
        params = {cid: bl.ReftR1Params(w, meta["lam"], meta["k"]) for cid, w in tensors.items()}
        return ek.ReftMethod(params, base, cfg.layer)
    return ek.ConceptVectorMethod(tensors, name=meta["method"])


# -- sweeps -------------------------------------------------------------------------

@dataclass
class RunResult:
    label: str
    seed: int
    held_in: float | None
    held_out: float | None
    reports: dict = field(default_factory=dict)
    steps_to_target: int | None = None
    mean_step_flops: float | None = None

    def to_dict(self):
        return {"label": self.label, "seed": self.seed, "held_in": self.held_in, "held_out": self.held_out,
                "steps_to_target": self.steps_to_target, "mean_step_flops": self.mean_step_flops}


def run_hypernet(cfg: ExperimentConfig, base: TinyLM, label: str, seed: int, n_concepts: int | None = None,
                 splits=("held_in", "held_out"), **overrides) -> RunResult:
    """Train one hypernetwork and evaluate it on the requested splits."""
    data = make_data(cfg, n_concepts)
    hyper, _ = train_hypernet(cfg, base, data, seed=seed, **overrides)
    judge = make_judge(cfg, base, data)
    method = ek.HypernetMethod(hyper, base, cfg.layer, name=label)
    res = RunResult(label, seed, None, None)
    if "held_in" in splits:
        rep = ek.evaluate(method, data.eval_in, base, judge, cfg.factor_grid, cfg.layer)
        res.held_in, res.reports["held_in"] = rep.aggregate, rep
    if "held_out" in splits:
        rep = ek.evaluate(method, data.eval_out, base, judge, cfg.factor_grid, cfg.layer)
        res.held_out, res.reports["held_out"] = rep.aggregate, rep
    log.info("%s seed %d held-in %s held-out %s", label, seed, res.held_in, res.held_out)
    return res


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def variant_comparison(cfg: ExperimentConfig, base: TinyLM, n_concepts: int | None = None) -> dict:
    out = {}
    for v in ("NoContext", "InContext", "CrossAttention"):
        out[v] = [run_hypernet(cfg, base, v, s, n_concepts, ("held_out",), variant=v) for s in cfg.sweep.seeds]
    return out


def scale_sweep(cfg: ExperimentConfig, base: TinyLM) -> dict:
    """Held-out results per training-set size (number of steering prompts)."""
    return {n: [run_hypernet(cfg, base, f"{cfg.hypernet.variant}-c{n}", s, n, ("held_out",)) for s in cfg.sweep.seeds]
            for n in cfg.sweep.sizes}


def ablation_grid(cfg: ExperimentConfig, base: TinyLM, depths=None, inits=None, seeds=None) -> dict:
    """(init, depth) -> runs; learning rate follows the depth rule from ``sweep.depth_base_lr``."""
    from .hypernet import depth_lr

    depths = cfg.sweep.depths if depths is None else depths
    inits = cfg.sweep.inits if inits is None else inits
    seeds = cfg.sweep.seeds if seeds is None else seeds
    grid = {}
    for init in inits:
        for n in depths:
            grid[(init, n)] = [run_hypernet(cfg, base, f"{init}-N{n}", s, lr=depth_lr(cfg.sweep.depth_base_lr, n),
                                            n_blocks=n, init=init) for s in seeds]
    return grid


def reconstruction_run(cfg: ExperimentConfig, base: TinyLM, n_concepts: int = 10, steps: int = 1500, lr: float = 1e-3):
    """ReFT-r1 targets for ``n_concepts`` concepts, then a NoContext fit to them; returns (hyper, mean cosine, targets)."""
    data = make_data(cfg, n_concepts)
    store = train_reft_store(cfg, base, data.train)
    targets = {}
    for cid, params in store.items():
        ts = [t for t in data.train if t.concept_id == cid]
        acts = [base.capture_residual(t.x, cfg.layer).acts for t in ts]
        mags = [bl.reft_steer_vector(a, params).values for a in acts]
        targets[cid] = np.mean(mags, axis=0)
    pairs = [(cl.get_concept(cid).steering_prompt, v) for cid, v in targets.items()]
    hc = hypernet_config(cfg, variant="NoContext", unit_norm_output=False)
    tc = HyperTrainConfig(steps=steps, batch_size=min(32, len(pairs)), lr=lr, log_every=0, seed=cfg.seed)
    hyper, _, cos = train_reconstruction(pairs, hc, tc, base, cfg.seed)
    return hyper, cos, targets


def flops_to_target(cfg: ExperimentConfig, base: TinyLM, n_concepts: int, seed: int, target: float | None = None,
                    eval_every: int = 25, max_steps: int | None = None) -> RunResult:
    """Steps N* until the held-in eval loss reaches ``target`` and the mean per-step FLOPs."""
    target = cfg.sweep.target_loss if target is None else target
    data = make_data(cfg, n_concepts)
    c2 = cfg.replace(**{"train.steps": max_steps or cfg.train.steps, "train.epochs": None})
    hyper, result = train_hypernet(c2, base, data, seed=seed, eval_every=eval_every, stop_loss=target)
    res = RunResult(f"flops-c{n_concepts}", seed, None, None)
    res.steps_to_target = result.steps_to_target(target)
    res.mean_step_flops = float(np.mean(result.flops)) if result.flops else None
    return res


def tflops_curve(runs: dict) -> dict:
    """c -> per-concept TFLOPs per seed (None where the target was not reached)."""
    out = {}
    for c, rs in runs.items():
        vals = []
        for r in rs:
            if r.steps_to_target is None or not r.steps_to_target:
                vals.append(None)
            else:
                vals.append(ek.tflops_per_concept(r.mean_step_flops / 1e12, r.steps_to_target, c))
        out[c] = vals
    return out
