"""Synthetic concept micro-world.

A base prompt is ``[TASK, c1..cn, SEP]`` over distinct lowercase content
tokens; the answer is the task's exact solution followed by ``EOS``. A concept
rewrites the answer by a deterministic rule (append a marker, wrap in a
bracket pair, shift into the uppercase register, interleave a separator,
prefix a tag). Its steering prompt is the two-token sequence
``[FAMILY, PARAM]``; prompt steering prepends ``[INSTR, FAMILY, PARAM]``.

Every concept parameter is a distinct token, so held-out concepts differ from
held-in ones only in the parameter token of a family that was seen.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError
from .numerics.rng import make_rng

# -- vocabulary ----------------------------------------------------------------

VOCAB_SIZE = 256
PAD, EOS, SEP, INSTR = 0, 1, 2, 3
TASK_TOKENS = {"echo": 8, "reverse": 9, "sort": 10, "swap": 11}
FAMILIES = ("mark", "wrap", "case", "sep", "tag")
FAMILY_TOKENS = {f: 16 + i for i, f in enumerate(FAMILIES)}
N_CONTENT = 32
LOWER = tuple(range(32, 32 + N_CONTENT))
UPPER = tuple(range(64, 64 + N_CONTENT))
N_PARAMS = 16
MARKERS = tuple(range(96, 112))
OPENS = tuple(range(112, 128))
CLOSES = tuple(range(128, 144))
SEPARATORS = tuple(range(144, 160))
TAGS = tuple(range(160, 176))
REGISTERS = tuple(range(176, 192))

_LOWER_SET = frozenset(LOWER)
_UPPER_SET = frozenset(UPPER)

MIN_CONTENT, MAX_CONTENT = 3, 6


def is_content(tok: int) -> bool:
    return tok in _LOWER_SET


# -- tasks ---------------------------------------------------------------------

def _swap_pairs(xs):
    out = list(xs)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


_SOLVERS: dict[str, Callable] = {
    "echo": lambda xs: list(xs),
    "reverse": lambda xs: list(xs)[::-1],
    "sort": lambda xs: sorted(xs),
    "swap": _swap_pairs,
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    token: int
    min_len: int = MIN_CONTENT
    max_len: int = MAX_CONTENT

    def solve(self, x) -> list[int]:
        """Correct unsteered answer (without EOS) for prompt ``x``."""
        x = list(x)
        if len(x) < 2 or x[0] != self.token or x[-1] != SEP:
            raise DataError(f"prompt is not a {self.task_id} prompt: {x}")
        return _SOLVERS[self.task_id](x[1:-1])

    def sample_prompt(self, rng: np.random.Generator) -> tuple[int, ...]:
        n = int(rng.integers(self.min_len, self.max_len + 1))
        content = rng.choice(N_CONTENT, size=n, replace=False) + LOWER[0]
        return (self.token, *(int(c) for c in content), SEP)


TASKS = {name: TaskSpec(name, tok) for name, tok in TASK_TOKENS.items()}
_TASK_BY_TOKEN = {t.token: t for t in TASKS.values()}


def task_index(x) -> int:
    """Position of the prompt's task in ``TASKS`` order."""
    return list(TASKS).index(task_for_prompt(x).task_id)


def task_for_prompt(x) -> TaskSpec:
    try:
        return _TASK_BY_TOKEN[int(x[0])]
    except (KeyError, IndexError):
        raise DataError(f"unknown task prompt {x}") from None


# -- concepts ------------------------------------------------------------------

@dataclass(frozen=True)
class ConceptSpec:
    concept_id: str
    family: str
    param: int  # parameter index within the family, 0..15

    @property
    def param_token(self) -> int:
        return {
            "mark": MARKERS, "wrap": OPENS, "case": REGISTERS, "sep": SEPARATORS, "tag": TAGS,
        }[self.family][self.param]

    @property
    def steering_prompt(self) -> tuple[int, int]:
        return (FAMILY_TOKENS[self.family], self.param_token)

    @property
    def instruction(self) -> tuple[int, int, int]:
        return (INSTR, *self.steering_prompt)

    # label transformer
    def transform(self, answer) -> list[int]:
        a = list(answer)
        p = self.param
        if self.family == "mark":
            return a + [MARKERS[p]]
        if self.family == "wrap":
            return [OPENS[p]] + a + [CLOSES[p]]
        if self.family == "case":
            return [UPPER[(t - LOWER[0] + p) % N_CONTENT] if t in _LOWER_SET else t for t in a]
        if self.family == "sep":
            out = []
            for i, t in enumerate(a):
                if i:
                    out.append(SEPARATORS[p])
                out.append(t)
            return out
        if self.family == "tag":
            return [TAGS[p]] + a
        raise DataError(f"unknown family {self.family}")

    def strip(self, output) -> list[int]:
        """Concept-invariant content of ``output`` (undo this concept's rule)."""
        o = [int(t) for t in output]
        p = self.param
        if self.family == "mark":
            return [t for t in o if t != MARKERS[p]]
        if self.family == "wrap":
            return [t for t in o if t not in (OPENS[p], CLOSES[p])]
        if self.family == "case":
            return [LOWER[(t - UPPER[0] - p) % N_CONTENT] if t in _UPPER_SET else t for t in o]
        if self.family == "sep":
            return [t for t in o if t != SEPARATORS[p]]
        if self.family == "tag":
            return [t for t in o if t != TAGS[p]]
        raise DataError(f"unknown family {self.family}")

    def check(self, output) -> int:
        """2 = rule satisfied, 1 = partially (present but misplaced), 0 = absent."""
        o = [int(t) for t in output]
        p = self.param
        if not o:
            return 0
        if self.family == "mark":
            m = MARKERS[p]
            if m not in o:
                return 0
            return 2 if len(o) > 1 and o[-1] == m and o.count(m) == 1 else 1
        if self.family == "wrap":
            op, cl = OPENS[p], CLOSES[p]
            if op not in o and cl not in o:
                return 0
            ok = len(o) > 2 and o[0] == op and o[-1] == cl and o.count(op) == 1 and o.count(cl) == 1
            return 2 if ok else 1
        if self.family == "case":
            n_up = sum(t in _UPPER_SET for t in o)
            if n_up == 0:
                return 0
            return 2 if n_up == len(o) else 1
        if self.family == "sep":
            s = SEPARATORS[p]
            if s not in o:
                return 0
            ok = len(o) >= 3 and len(o) % 2 == 1 and all(t == s for t in o[1::2]) and s not in o[0::2]
            return 2 if ok else 1
        if self.family == "tag":
            g = TAGS[p]
            if g not in o:
                return 0
            return 2 if len(o) > 1 and o[0] == g and o.count(g) == 1 else 1
        raise DataError(f"unknown family {self.family}")


def concept_id(family: str, param: int) -> str:
    return f"{family}:{param:02d}"


ALL_CONCEPTS = {concept_id(f, p): ConceptSpec(concept_id(f, p), f, p) for f in FAMILIES for p in range(N_PARAMS)}


def get_concept(cid: str) -> ConceptSpec:
    try:
        return ALL_CONCEPTS[cid]
    except KeyError:
        raise KeyError(f"unknown concept id {cid!r}") from None


def default_concept_order(seed: int = 0) -> list[str]:
    """All concept ids, interleaved across families in a seeded order.

    Taking a prefix of this list yields a family-balanced concept subset, so
    ``n_concepts=10`` touches every family twice.
    """
    rng = make_rng(seed, "concept-order")
    per_family = {f: list(rng.permutation(N_PARAMS)) for f in FAMILIES}
    order = []
    for i in range(N_PARAMS):
        for f in FAMILIES:
            order.append(concept_id(f, int(per_family[f][i])))
    return order


# -- records -------------------------------------------------------------------

SPLITS = ("train", "eval-held-in", "eval-held-out")


@dataclass(frozen=True)
class SteeringTask:
    x: tuple
    s: tuple
    y_label: tuple
    concept_id: str
    task_id: str
    split: str

    def to_json(self) -> str:
        d = asdict(self)
        d["x"], d["s"], d["y_label"] = list(self.x), list(self.s), list(self.y_label)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "SteeringTask":
        return cls(tuple(d["x"]), tuple(d["s"]), tuple(d["y_label"]), d["concept_id"], d["task_id"], d["split"])

    @property
    def concept(self) -> ConceptSpec:
        return get_concept(self.concept_id)

    @property
    def task(self) -> TaskSpec:
        return TASKS[self.task_id]


def make_task(x, concept: ConceptSpec, split: str) -> SteeringTask:
    task = task_for_prompt(x)
    label = concept.transform(task.solve(x))
    return SteeringTask(tuple(int(t) for t in x), concept.steering_prompt, tuple(label),
                        concept.concept_id, task.task_id, split)


def negative_label(st: SteeringTask) -> list[int]:
    """A rule-violating output for the same prompt: the untransformed answer."""
    return TASKS[st.task_id].solve(st.x)


# -- generators ----------------------------------------------------------------

@dataclass
class Corpus:
    """Pretraining lines ``[instruction] x answer EOS`` and where each answer starts.

    ``soft`` holds, per line, the steering prompt of a concept delivered as a
    residual-stream signal instead of a token prefix (``None`` for ordinary
    lines). Such lines carry the transformed answer but no instruction tokens.
    """

    lines: list = field(default_factory=list)
    answer_start: list = field(default_factory=list)
    soft: list = field(default_factory=list)

    def __len__(self):
        return len(self.lines)

    def soft_array(self) -> np.ndarray:
        """(N, 3) steering-prompt tokens and task index per line, -1 where the line is ordinary."""
        out = np.full((len(self.lines), 3), -1, dtype=np.int64)
        for i, s in enumerate(self.soft or []):
            if s is not None:
                out[i, :2] = s
                out[i, 2] = task_index(self.lines[i])
        return out

    def as_arrays(self, pad: int = PAD):
        t = max(len(line) for line in self.lines)
        toks = np.full((len(self.lines), t), pad, dtype=np.int64)
        mask = np.zeros((len(self.lines), t), dtype=bool)
        for i, (line, a) in enumerate(zip(self.lines, self.answer_start)):
            toks[i, : len(line)] = line
            mask[i, a - 1: len(line) - 1] = True  # positions predicting answer + EOS
        return toks, mask


def gen_corpus(seed: int, n_lines: int, instructed_fraction: float = 0.6,
               concepts=None, tasks=None, soft_fraction: float = 0.0) -> Corpus:
    """Seeded pretraining corpus covering every task and (by default) every concept.

    A ``soft_fraction`` share of the concept lines drops the instruction prefix
    and records the concept in ``Corpus.soft`` instead.
    """
    if n_lines < 1:
        raise ConfigError("n_lines must be >= 1")
    if not 0.0 <= soft_fraction <= 1.0 or not 0.0 <= instructed_fraction <= 1.0:
        raise ConfigError("fractions must lie in [0, 1]")
    rng = make_rng(seed, "corpus")
    concepts = list(ALL_CONCEPTS.values()) if concepts is None else [get_concept(c) if isinstance(c, str) else c for c in concepts]
    tasks = list(TASKS.values()) if tasks is None else list(tasks)
    corpus = Corpus()
    for _ in range(n_lines):
        task = tasks[int(rng.integers(len(tasks)))]
        x = task.sample_prompt(rng)
        ans = task.solve(x)
        soft = None
        if concepts and rng.random() < instructed_fraction:
            c = concepts[int(rng.integers(len(concepts)))]
            ans = c.transform(ans)
            if soft_fraction and rng.random() < soft_fraction:
                prefix, soft = [], c.steering_prompt
            else:
                prefix = list(c.instruction)
        else:
            prefix = []
        line = prefix + list(x) + ans + [EOS]
        corpus.lines.append(line)
        corpus.answer_start.append(len(prefix) + len(x))
        corpus.soft.append(soft)
    return corpus


def _unique_prompts(rng, n, tasks):
    seen = set()
    out = []
    while len(out) < n:
        task = tasks[int(rng.integers(len(tasks)))]
        x = task.sample_prompt(rng)
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


@dataclass
class Manifests:
    train: list
    eval: list


def gen_dataset(concepts, n_concepts: int | None = None, n_train: int = 72, n_eval: int = 10,
                seed: int = 0, eval_split: str = "eval-held-in", tasks=None) -> Manifests:
    """Train/eval manifests with exact per-concept base:steering ratios.

    Eval base prompts are disjoint from train base prompts of the same concept.
    ``concepts`` are ids or specs; ``n_concepts`` takes a prefix.
    """
    concepts = [get_concept(c) if isinstance(c, str) else c for c in concepts]
    if n_concepts is not None:
        if n_concepts > len(concepts):
            raise ConfigError(f"requested {n_concepts} concepts but only {len(concepts)} are defined")
        concepts = concepts[:n_concepts]
    if n_train < 0 or n_eval < 0:
        raise ConfigError("per-concept counts must be >= 0")
    if eval_split not in SPLITS[1:]:
        raise ConfigError(f"bad eval split {eval_split!r}")
    tasks = list(TASKS.values()) if tasks is None else list(tasks)
    train, evals = [], []
    for c in concepts:
        rng = make_rng(seed, "dataset", c.concept_id)
        prompts = _unique_prompts(rng, n_train + n_eval, tasks)
        train.extend(make_task(x, c, "train") for x in prompts[:n_train])
        evals.extend(make_task(x, c, eval_split) for x in prompts[n_train:])
    return Manifests(train, evals)


def split_heldout(concepts, fraction: float, seed: int = 0):
    """Split concepts into (held-in, held-out), stratified by family.

    Every held-out concept's family keeps at least one held-in member.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"held-out fraction must lie in (0, 1), got {fraction}")
    concepts = [get_concept(c) if isinstance(c, str) else c for c in concepts]
    by_family: dict[str, list] = {}
    for c in concepts:
        by_family.setdefault(c.family, []).append(c)
    for fam, members in by_family.items():
        if len(members) < 2:
            raise ConfigError(f"family {fam!r} needs >= 2 parameterizations to split")
    target = int(round(fraction * len(concepts)))
    quotas = {f: fraction * len(m) for f, m in by_family.items()}
    counts = {f: min(int(np.floor(q)), len(by_family[f]) - 1) for f, q in quotas.items()}
    order = sorted(by_family, key=lambda f: (-(quotas[f] - np.floor(quotas[f])), f))
    while sum(counts.values()) < target:
        grown = False
        for f in order:
            if sum(counts.values()) >= target:
                break
            if counts[f] < len(by_family[f]) - 1:
                counts[f] += 1
                grown = True
        if not grown:
            break
    rng = make_rng(seed, "heldout")
    held_in, held_out = [], []
    for f in sorted(by_family):
        members = by_family[f]
        perm = rng.permutation(len(members))
        out_idx = set(int(i) for i in perm[: counts[f]])
        for i, c in enumerate(members):
            (held_out if i in out_idx else held_in).append(c.concept_id)
    return held_in, held_out


# -- rubric --------------------------------------------------------------------

def concept_check(output, concept) -> int:
    if isinstance(concept, str):
        concept = get_concept(concept)
    return concept.check(output)


def task_check(output, task, x, concept=None) -> int:
    """Instruction axis: 2 exact content match, 1 if >= half the positions agree, else 0."""
    if isinstance(task, str):
        task = TASKS[task]
    if isinstance(concept, str):
        concept = get_concept(concept)
    content = concept.strip(output) if concept is not None else [int(t) for t in output]
    ref = task.solve(x)
    if not content:
        return 0
    if content == ref:
        return 2
    agree = sum(a == b for a, b in zip(content, ref))
    return 1 if agree * 2 >= len(ref) else 0


# -- manifest files ------------------------------------------------------------

def write_manifest(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path) -> list[SteeringTask]:
    with open(path, encoding="utf-8") as fh:
        return [SteeringTask.from_dict(json.loads(line)) for line in fh if line.strip()]
