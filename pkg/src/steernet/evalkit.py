"""Judge, steering score, factor-sweep evaluation and the analysis helpers."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conceptlab as cl
from .errors import CapabilityError, ConfigError, DataError, FitError, RankError
from .tinylm import DecodeConfig, InterventionSpec, TinyLM

DEFAULT_FACTORS = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)
F_REFT_TFLOPS = (666.27, 20.74)  # reference cost of one ReFT-r1 vector at full scale (mean, std)
REPORT_COLUMNS = ("method", "split", "factor", "concept_id", "concept_score", "instruct_score",
                  "fluency_score", "steering_score")


# -- scores ----------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreTriple:
    concept: int
    instruct: int
    fluency: int

    def __post_init__(self):
        for name in ("concept", "instruct", "fluency"):
            if getattr(self, name) not in (0, 1, 2):
                raise ValueError(f"{name} score must be 0, 1 or 2")

    @property
    def steering_score(self) -> float:
        return harmonic_mean(self)


def harmonic_mean(t) -> float:
    """Harmonic mean of the three axes; 0 when any axis is 0."""
    c, i, f = (t.concept, t.instruct, t.fluency) if isinstance(t, ScoreTriple) else t
    if c == 0 or i == 0 or f == 0:
        return 0.0
    return 3.0 / (1.0 / c + 1.0 / i + 1.0 / f)


def _max_run(tokens) -> int:
    best = run = 0
    prev = None
    for t in tokens:
        run = run + 1 if t == prev else 1
        prev = t
        best = max(best, run)
    return best


class Judge:
    """Rule-based judge: concept and instruct axes from the rubric, fluency from perplexity.

    Fluency is the unsteered LM's perplexity of the concept-stripped content
    (plus EOS) given the base prompt: ``<= tau1`` scores 2, ``<= tau2`` scores 1,
    anything else 0. Empty content or a run of ``max_repeat`` identical tokens
    scores 0.
    """

    def __init__(self, base: TinyLM, tau1: float = 1.5, tau2: float = 4.0, max_repeat: int = 3):
        if not 1.0 <= tau1 < tau2:
            raise ConfigError(f"fluency thresholds must satisfy 1 <= tau1 < tau2, got {tau1}, {tau2}")
        self.base = base
        self.tau1 = float(tau1)
        self.tau2 = float(tau2)
        self.max_repeat = max_repeat

    @classmethod
    def calibrated(cls, base: TinyLM, prompts, floors=(1.5, 4.0), max_new: int = 24) -> "Judge":
        """Thresholds at the 90th/99th percentile perplexity of unsteered generations, floored."""
        prompts = [list(p) for p in prompts]
        outs = base.generate(prompts, decode=DecodeConfig(max_new=max_new))
        seqs = [p + o + [cl.EOS] for p, o in zip(prompts, outs)]
        ppl = np.exp(base.sequence_nll(seqs, [len(p) for p in prompts]))
        t1 = max(float(np.percentile(ppl, 90)), floors[0])
        t2 = max(float(np.percentile(ppl, 99)), floors[1], t1 * 1.01)
        return cls(base, t1, t2)

    def thresholds(self) -> dict:
        return {"tau1": self.tau1, "tau2": self.tau2, "max_repeat": self.max_repeat}

    def fluency_from_ppl(self, ppl: float) -> int:
        if ppl <= self.tau1:
            return 2
        if ppl <= self.tau2:
            return 1
        return 0

    def judge(self, generation, task: cl.SteeringTask) -> ScoreTriple:
        return self.judge_many([generation], [task])[0]

    def judge_many(self, generations, tasks) -> list[ScoreTriple]:
        gens = [[int(t) for t in g] for g in generations]
        if len(gens) != len(tasks):
            raise DataError("generations and tasks differ in length")
        concepts = [cl.get_concept(t.concept_id) for t in tasks]
        task_specs = [cl.TASKS[t.task_id] for t in tasks]
        contents = [c.strip(g) for c, g in zip(concepts, gens)]
        fluent = [bool(body) and _max_run(g) < self.max_repeat for g, body in zip(gens, contents)]
        ppl = np.full(len(gens), np.inf)
        idx = [i for i, ok in enumerate(fluent) if ok]
        max_len = self.base.config.max_seq_len
        for i0 in range(0, len(idx), 256):
            part = idx[i0: i0 + 256]
            seqs = [(list(tasks[i].x) + contents[i] + [cl.EOS])[:max_len] for i in part]
            nll = self.base.sequence_nll(seqs, [len(tasks[i].x) for i in part])
            ppl[part] = np.exp(nll)
        out = []
        for i, (g, t) in enumerate(zip(gens, tasks)):
            c_score = concepts[i].check(g)
            i_score = cl.task_check(g, task_specs[i], t.x, concepts[i])
            f_score = self.fluency_from_ppl(float(ppl[i])) if fluent[i] else 0
            out.append(ScoreTriple(c_score, i_score, f_score))
        return out


# -- methods ---------------------------------------------------------------------

class SteeringMethod:
    """Something that turns eval tasks into steered generations.

    Vector methods implement ``vectors``; prompt methods override ``prompts``
    and set ``uses_factor = False``.
    """

    name = "method"
    uses_factor = True

    def check_tasks(self, tasks) -> None:
        pass

    def prompts(self, tasks):
        return [list(t.x) for t in tasks]

    def vectors(self, tasks) -> np.ndarray | None:
        raise NotImplementedError


class UnsteeredMethod(SteeringMethod):
    name = "unsteered"
    uses_factor = False

    def vectors(self, tasks):
        return None


class PromptMethod(SteeringMethod):
    name = "prompt"
    uses_factor = False

    def __init__(self, max_seq_len: int | None = None):
        self.max_seq_len = max_seq_len

    def prompts(self, tasks):
        from .baselines import prompt_steer

        return [prompt_steer(t.s, t.x, self.max_seq_len) for t in tasks]

    def vectors(self, tasks):
        return None


class ConceptVectorMethod(SteeringMethod):
    """One fixed vector per concept (DiffMean, or any precomputed store)."""

    def __init__(self, vectors: dict, name: str = "diffmean"):
        self.store = {k: np.asarray(v, dtype=np.float32) for k, v in vectors.items()}
        self.name = name

    def check_tasks(self, tasks):
        missing = sorted({t.concept_id for t in tasks} - set(self.store))
        if missing:
            raise ConfigError(f"{self.name}: no vector for concepts {missing[:5]}")

    def vectors(self, tasks):
        return np.stack([self.store[t.concept_id] for t in tasks])


class ReftMethod(SteeringMethod):
    """ReFT-r1: per-concept unit direction, magnitude from the prompt's top-k latents."""

    name = "reft-r1"

    def __init__(self, params: dict, base: TinyLM, layer: int | None = None):
        self.params = params
        self.base = base
        self.layer = base.config.default_layer if layer is None else layer

    def check_tasks(self, tasks):
        missing = sorted({t.concept_id for t in tasks} - set(self.params))
        if missing:
            raise ConfigError(f"reft-r1: no trained direction for concepts {missing[:5]}")

    def vectors(self, tasks):
        from .baselines import reft_steer_vector

        out = []
        for t in tasks:
            acts = self.base.capture_residual(t.x, self.layer).acts
            out.append(reft_steer_vector(acts, self.params[t.concept_id]).values)
        return np.stack(out)


class HypernetMethod(SteeringMethod):
    """Vectors from a trained hypernetwork; unit-norm heads get a top-k latent magnitude."""

    def __init__(self, hyper, base: TinyLM, layer: int | None = None, name: str | None = None):
        from .hypernet import ContextCache

        self.hyper = hyper
        self.base = base
        self.layer = base.config.default_layer if layer is None else layer
        self.name = name or f"hypernet-{hyper.config.variant}"
        self.cache = ContextCache(base, self.layer)

    def vectors(self, tasks):
        from .baselines import topk_latent_magnitude
        from .hypernet import HyperInputs
        from .numerics import Tensor, no_grad

        out = []
        with no_grad():
            for i in range(0, len(tasks), 128):
                part = tasks[i: i + 128]
                inp: HyperInputs = self.hyper.make_inputs([(t.s, t.x) for t in part], base=self.base,
                                                          layer=self.layer, cache=self.cache)
                v = self.hyper.vectors(inp)
                if self.hyper.config.unit_norm_output:
                    ctx, mask = self.cache.batch([tuple(t.x) for t in part])
                    mag = topk_latent_magnitude(ctx, mask, Tensor(v.data), self.hyper.config.topk)
                    v = Tensor(v.data * mag.data[:, None])
                out.append(v.data)
        return np.concatenate(out).astype(np.float32)


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    split: str
    factor_scores: dict  # factor -> aggregate
    best_factor: float | None
    aggregate: float
    per_concept: dict  # concept -> mean steering score at the best factor
    triples: list  # ScoreTriple per example at the best factor
    rows: list = field(default_factory=list)  # per example, every factor
    generations: dict = field(default_factory=dict)  # factor -> list of outputs

    def summary_rows(self):
        """Per (factor, concept) means, in a stable order."""
        acc = {}
        for r in self.rows:
            key = (r["factor"], r["concept_id"])
            acc.setdefault(key, []).append(r)
        out = []
        for (factor, cid) in sorted(acc, key=lambda k: (-1.0 if k[0] is None else k[0], k[1])):
            rs = acc[(factor, cid)]
            out.append({
                "method": self.method, "split": self.split, "factor": factor, "concept_id": cid,
                "concept_score": float(np.mean([r["concept_score"] for r in rs])),
                "instruct_score": float(np.mean([r["instruct_score"] for r in rs])),
                "fluency_score": float(np.mean([r["fluency_score"] for r in rs])),
                "steering_score": float(np.mean([r["steering_score"] for r in rs])),
            })
        return out


def _aggregate(tasks, triples):
    by_c = {}
    for t, tr in zip(tasks, triples):
        by_c.setdefault(t.concept_id, []).append(tr.steering_score)
    per_concept = {c: float(np.mean(v)) for c, v in sorted(by_c.items())}
    return float(np.mean(list(per_concept.values()))), per_concept


def steered_generations(method: SteeringMethod, tasks, base: TinyLM, factor, layer: int,
                        decode: DecodeConfig, vecs=None, chunk: int = 128):
    prompts = method.prompts(tasks)
    outs = []
    for i in range(0, len(tasks), chunk):
        sl = slice(i, i + chunk)
        iv = None
        if vecs is not None and factor is not None:
            iv = InterventionSpec(layer, float(factor), vecs[sl])
        outs.extend(base.generate(prompts[sl], iv, decode))
    return outs


def evaluate(method: SteeringMethod, tasks, base: TinyLM, judge: Judge, factors=DEFAULT_FACTORS,
             layer: int | None = None, decode: DecodeConfig | None = None, keep_generations: bool = False) -> EvalReport:
    """Sweep the factor grid, judge every generation and report the best factor's aggregate."""
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("empty evaluation manifest")
    splits = {t.split for t in tasks}
    if len(splits) != 1:
        raise ConfigError(f"evaluation manifest mixes splits {sorted(splits)}")
    split = splits.pop()
    method.check_tasks(tasks)
    layer = base.config.default_layer if layer is None else layer
    decode = decode or DecodeConfig()
    if method.uses_factor:
        grid = sorted({float(f) for f in factors})
        if not grid or 0.0 not in grid:
            raise ConfigError("factor grid must be nonempty and include 0")
        vecs = method.vectors(tasks)
    else:
        grid, vecs = [None], None
    factor_scores, rows, gens, best = {}, [], {}, None
    for f in grid:
        outs = steered_generations(method, tasks, base, f, layer, decode, vecs)
        triples = judge.judge_many(outs, tasks)
        agg, per_c = _aggregate(tasks, triples)
        factor_scores[f] = agg
        if keep_generations:
            gens[f] = outs
        for t, tr in zip(tasks, triples):
            rows.append({"method": method.name, "split": split, "factor": f, "concept_id": t.concept_id,
                         "task_id": t.task_id, "x": list(t.x),
                         "concept_score": tr.concept, "instruct_score": tr.instruct,
                         "fluency_score": tr.fluency, "steering_score": tr.steering_score})
        if best is None or agg > best[1]:
            best = (f, agg, per_c, triples)
    return EvalReport(method.name, split, factor_scores, best[0], best[1], best[2], best[3], rows, gens)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report(report: EvalReport, out_dir, stem: str | None = None) -> dict:
    """Write per-example JSONL, a per-concept CSV summary and a small JSON header; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.method}_{report.split}"
    jl = out / f"{stem}.jsonl"
    with open(jl, "w", encoding="utf-8", newline="\n") as fh:
        for r in report.rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.summary_rows():
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    csv_path = out / f"{stem}.csv"
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    head = {
        "method": report.method, "split": report.split,
        "best_factor": report.best_factor, "aggregate": round(report.aggregate, 6),
        "factor_scores": {_fmt(k) or "none": round(v, 6) for k, v in report.factor_scores.items()},
        "per_concept": {k: round(v, 6) for k, v in report.per_concept.items()},
    }
    head_path = out / f"{stem}.summary.json"
    head_path.write_text(json.dumps(head, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"jsonl": jl, "csv": csv_path, "summary": head_path}


# -- FLOPs -------------------------------------------------------------------------

@dataclass
class FlopsLedger:
    records: list = field(default_factory=list)

    def add(self, flops) -> None:
        self.records.append(int(flops))

    def extend(self, flops) -> None:
        for f in flops:
            self.add(f)

    @property
    def cumulative(self) -> int:
        return int(sum(self.records))

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def mean_per_step(self) -> float:
        if not self.records:
            raise DataError("empty FLOPs ledger")
        return self.cumulative / self.steps

    def merge(self, other: "FlopsLedger") -> "FlopsLedger":
        return FlopsLedger(self.records + other.records)


def tflops_per_concept(ledger, n_steps_to_target: int, n_concepts: int) -> float:
    """``F_D(c) = N* x F_step / c`` in TFLOPs; ``ledger`` may be a FlopsLedger or a mean in TFLOPs."""
    if n_concepts == 0:
        raise ZeroDivisionError("number of concepts must be >= 1")
    if n_concepts < 0 or n_steps_to_target < 1:
        raise ValueError("need n_concepts >= 1 and n_steps_to_target >= 1")
    step_tflops = ledger.mean_per_step / 1e12 if isinstance(ledger, FlopsLedger) else float(ledger)
    return n_steps_to_target * step_tflops / n_concepts


# -- curve fit ---------------------------------------------------------------------

@dataclass
class FitParams:
    a: float
    b: float
    d: float
    r_squared: float

    def __call__(self, c):
        return self.a + self.b * np.exp(self.d * np.asarray(c, dtype=np.float64))

    @property
    def asymptote(self) -> float:
        return self.a if self.d < 0 else math.inf


def _linear_ab(c, y, d):
    e = np.exp(d * c)
    A = np.stack([np.ones_like(c), e], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - (a + b * e)
    return a, b, float(r @ r)


def fit_flops_curve(points, max_iter: int = 200, d_grid=None) -> FitParams:
    """Least-squares fit of ``f(c) = a + b exp(d c)``.

    A grid over ``d`` (with ``a``, ``b`` solved exactly for each) seeds a
    damped Gauss-Newton refinement of all three parameters.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise ValueError("need at least 4 (c, F) points")
    c, y = pts[:, 0], pts[:, 1]
    if len(np.unique(c)) != len(c):
        raise ValueError("c values must be distinct")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 1e-24 * max(1.0, float(y @ y)):
        return FitParams(float(y.mean()), 0.0, 0.0, 1.0)
    span = float(c.max() - c.min())
    if d_grid is None:
        mags = np.geomspace(1e-4, 50.0, 400) / span
        d_grid = np.concatenate([-mags[::-1], mags])
    best = None
    for d in d_grid:
        a, b, sse = _linear_ab(c, y, d)
        if np.isfinite(sse) and (best is None or sse < best[3]):
            best = (a, b, d, sse)
    theta = np.array(best[:3], dtype=np.float64)
    sse = best[3]
    lam = 1e-3
    converged = False
    for _ in range(max_iter):
        a, b, d = theta
        e = np.exp(d * c)
        r = y - (a + b * e)
        J = np.stack([np.ones_like(c), e, b * c * e], axis=1)
        g = J.T @ r
        H = J.T @ J
        step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-300), g)
        cand = theta + step
        ce = np.exp(cand[2] * c)
        rc = y - (cand[0] + cand[1] * ce)
        sse_c = float(rc @ rc)
        if np.isfinite(sse_c) and sse_c <= sse:
            rel = np.abs(step) / np.maximum(np.abs(cand), 1e-12)
            theta, sse = cand, sse_c
            lam = max(lam / 10, 1e-12)
            if rel.max() < 1e-12 or sse <= 1e-30 * ss_tot:
                converged = True
                break
        else:
            lam *= 10
            if lam > 1e12:
                converged = True  # no further descent possible: local minimum
                break
    r2 = 1.0 - sse / ss_tot
    result = FitParams(float(theta[0]), float(theta[1]), float(theta[2]), float(r2))
    if not converged and not sse <= 1e-12 * ss_tot:
        # the iteration budget ran out while still descending
        raise FitError("curve fit did not converge within the iteration budget", best=result)
    return result


# -- geometry ----------------------------------------------------------------------

def cosine_similarity_matrix(vectors, concept_ids):
    """Mean pairwise cosine between the vector sets of each pair of concepts.

    Returns (ordered concept ids, C x C matrix). Diagonal entries average
    over distinct pairs, or are 1 for a concept with a single vector.
    """
    V = np.asarray(vectors, dtype=np.float64)
    ids = list(concept_ids)
    if V.ndim != 2 or len(V) != len(ids) or len(V) == 0:
        raise DataError("need one concept id per vector")
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise DataError("zero-norm vector")
    U = V / norms[:, None]
    order = sorted(set(ids))
    groups = [np.flatnonzero(np.array([i == c for i in ids])) for c in order]
    S = U @ U.T
    M = np.empty((len(order), len(order)))
    for a, ga in enumerate(groups):
        for b, gb in enumerate(groups):
            block = S[np.ix_(ga, gb)]
            if a == b:
                n = len(ga)
                M[a, b] = 1.0 if n < 2 else (block.sum() - np.trace(block)) / (n * (n - 1))
            else:
                M[a, b] = block.mean()
    M = np.clip((M + M.T) / 2, -1.0, 1.0)
    return order, M


@dataclass
class PcaResult:
    projections: np.ndarray
    components: np.ndarray  # n_components x d
    variances: np.ndarray
    mean: np.ndarray


def pca(vectors, n_components: int = 2) -> PcaResult:
    """Project mean-centred vectors on the leading covariance eigenvectors.

    Each component's sign is fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or len(X) < n_components + 1:
        raise DataError(f"pca needs at least {n_components + 1} vectors")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / (len(X) - 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:n_components]
    w, V = w[order], V[:, order]
    scale = max(1.0, float(np.abs(cov).max()))
    if w[0] <= 1e-12 * scale:
        raise RankError("degenerate input: all vectors identical")
    for j in range(V.shape[1]):
        if V[np.argmax(np.abs(V[:, j])), j] < 0:
            V[:, j] = -V[:, j]
    return PcaResult(Xc @ V, V.T, np.maximum(w, 0.0), mu)


# -- attention dumps ---------------------------------------------------------------

def dump_attention(hyper, s, x, base: TinyLM, layer: int | None = None) -> dict:
    """Self- and cross-attention weights of every block and head for one (s, x)."""
    if not hyper.config.has_cross:
        raise CapabilityError(f"{hyper.config.variant} has no cross-attention to dump")
    layer = base.config.default_layer if layer is None else layer
    acts = base.capture_residual(x, layer).acts
    maps = hyper.attention_maps(s, x, acts)
    blocks = []
    for i, m in enumerate(maps):
        cross = m["cross"]
        blocks.append({
            "block": i,
            "self": m["self"].astype(np.float64).tolist(),
            "cross": cross.astype(np.float64).tolist(),
            "cross_max_column_mass": column_concentration(cross).tolist(),
        })
    return {"s": [int(t) for t in s], "x": [int(t) for t in x], "layer": layer, "blocks": blocks}


def column_concentration(weights) -> np.ndarray:
    """Per head, the largest column mass: max over keys of the mean weight across queries."""
    W = np.asarray(weights, dtype=np.float64)
    if W.ndim == 2:
        W = W[None]
    return W.mean(axis=1).max(axis=1)
