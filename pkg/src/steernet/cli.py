"""Command-line entry point: ``steernet <command> --config cfg.yaml [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import conceptlab as cl
from . import evalkit as ek
from . import experiments as ex
from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .errors import ConfigError

log = logging.getLogger("steernet")

COMMANDS = ("pretrain", "gen-data", "train", "train-baseline", "eval", "scale-sweep", "ablate", "analyze")
EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad factor grid {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="steernet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        return sp

    sp = add("pretrain", "pretrain the base LM")
    sp = add("gen-data", "write train/eval manifests")
    sp.add_argument("--n-concepts", type=int)
    for name, help_ in (("train", "train a hypernetwork"), ("scale-sweep", "held-out score versus training size"),
                        ("ablate", "init x depth ablation grid")):
        sp = add(name, help_)
        sp.add_argument("--base", type=Path, help="base LM checkpoint")
        sp.add_argument("--n-concepts", type=int)
        sp.add_argument("--variant", choices=("NoContext", "InContext", "CrossAttention"))
        sp.add_argument("--factor-grid", type=_grid)
    sp = add("train-baseline", "train per-concept baseline vectors")
    sp.add_argument("--base", type=Path)
    sp.add_argument("--n-concepts", type=int)
    sp.add_argument("--method", choices=("reft-r1", "diffmean"))
    sp = add("eval", "evaluate a steering method")
    sp.add_argument("--base", type=Path)
    sp.add_argument("--checkpoint", type=Path, help="hypernetwork checkpoint or vector store")
    sp.add_argument("--method", choices=("prompt", "unsteered"), help="checkpoint-free method")
    sp.add_argument("--split", choices=("held-in", "held-out", "both"), default="both")
    sp.add_argument("--n-concepts", type=int)
    sp.add_argument("--factor-grid", type=_grid)
    sp = add("analyze", "vector geometry, attention dumps and FLOPs curve fit")
    sp.add_argument("--base", type=Path)
    sp.add_argument("--checkpoint", type=Path, help="hypernetwork checkpoint")
    sp.add_argument("--flops", type=Path, help="CSV of (c, tflops) points to fit")
    sp.add_argument("--n-concepts", type=int)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "n_concepts", None) is not None:
        changes["data.n_concepts"] = args.n_concepts
    if getattr(args, "variant", None):
        changes["hypernet.variant"] = args.variant
    if getattr(args, "factor_grid", None) is not None:
        changes["factor_grid"] = args.factor_grid
    if getattr(args, "method", None) in ("reft-r1", "diffmean"):
        changes["baseline.method"] = args.method
    return cfg.replace(**changes) if changes else cfg


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(serialize_config(cfg), encoding="utf-8")
    return out


def _base(cfg: ExperimentConfig, args):
    if getattr(args, "base", None):
        return ex.load_base(args.base)
    local = Path(cfg.out_dir) / "base.hstr"
    if local.exists():
        return ex.load_base(local)
    return ex.cached_base(cfg)


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


# -- commands ------------------------------------------------------------------------

def cmd_pretrain(cfg, args):
    out = _out(cfg)
    p = cfg.pretrain
    corpus = cl.gen_corpus(cfg.seed, p.n_lines, instructed_fraction=p.instructed_fraction, soft_fraction=p.soft_fraction)
    from .tinylm import PretrainConfig, pretrain

    lm, trace = pretrain(corpus, ex.lm_config(cfg), seed=cfg.seed,
                         train_cfg=PretrainConfig(steps=p.steps, batch_size=p.batch_size, lr=p.lr))
    ex.save_base(lm, out / "base.hstr", cfg)
    _write_jsonl(out / "pretrain_log.jsonl",
                 ({"step": i, "loss": l, "flops": f} for i, (l, f) in enumerate(zip(trace.losses, trace.flops))))
    print(out / "base.hstr")


def cmd_gen_data(cfg, args):
    out = _out(cfg)
    data = ex.make_data(cfg)
    cl.write_manifest(out / "train.jsonl", data.train)
    cl.write_manifest(out / "eval_held_in.jsonl", data.eval_in)
    cl.write_manifest(out / "eval_held_out.jsonl", data.eval_out)
    print(f"{len(data.train)} train, {len(data.eval_in)} held-in eval, {len(data.eval_out)} held-out eval")


def cmd_train(cfg, args):
    out = _out(cfg)
    base = _base(cfg, args)
    data = ex.make_data(cfg)
    hyper, result = ex.train_hypernet(cfg, base, data)
    ex.save_hypernet(hyper, out / "hypernet.hstr", {"n_concepts": cfg.data.n_concepts, "seed": cfg.seed})
    _write_jsonl(out / "train_log.jsonl",
                 ({"step": i, "loss": l, "flops": f} for i, (l, f) in enumerate(zip(result.losses, result.flops))))
    print(out / "hypernet.hstr")


def cmd_train_baseline(cfg, args):
    out = _out(cfg)
    base = _base(cfg, args)
    data = ex.make_data(cfg)
    method = cfg.baseline.method
    if method == "reft-r1":
        store = ex.train_reft_store(cfg, base, data.train)
    elif method == "diffmean":
        store = ex.train_diffmean_store(cfg, base, data.train)
    else:
        raise ConfigError("prompt steering has no trainable vectors")
    path = ex.save_vector_store(store, out / f"vectors_{method}.hstr", method, cfg)
    print(path)


def _method(cfg, args, base):
    if args.method == "prompt":
        return ek.PromptMethod(base.config.max_seq_len)
    if args.method == "unsteered":
        return ek.UnsteeredMethod()
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint or --method")
    from .archive import load_checkpoint

    _, meta = load_checkpoint(args.checkpoint, with_meta=True)
    if meta.get("kind") == "hypernet":
        return ex.hypernet_method(ex.load_hypernet(args.checkpoint), base, cfg)
    return ex.load_vector_method(args.checkpoint, base, cfg)


def cmd_eval(cfg, args):
    out = _out(cfg)
    base = _base(cfg, args)
    data = ex.make_data(cfg)
    method = _method(cfg, args, base)
    judge = ex.make_judge(cfg, base, data)
    splits = {"held-in": [data.eval_in], "held-out": [data.eval_out], "both": [data.eval_in, data.eval_out]}[args.split]
    for tasks in splits:
        rep = ek.evaluate(method, tasks, base, judge, cfg.factor_grid, cfg.layer)
        paths = ek.write_report(rep, out)
        print(f"{rep.method} {rep.split}: best factor {rep.best_factor} aggregate {rep.aggregate:.4f} -> {paths['csv']}")


def cmd_scale_sweep(cfg, args):
    out = _out(cfg)
    base = _base(cfg, args)
    rows = []
    for n, runs in ex.scale_sweep(cfg, base).items():
        for r in runs:
            ek.write_report(r.reports["held_out"], out, stem=f"sweep_c{n}_s{r.seed}_held_out")
            rows.append((n, r.seed, r.held_out))
        med = ex.median([r.held_out for r in runs])
        print(f"c={n}: held-out median {med:.4f}")
    _write_csv(out / "scale_sweep.csv", ("n_concepts", "seed", "held_out"), rows)


def cmd_ablate(cfg, args):
    out = _out(cfg)
    base = _base(cfg, args)
    rows = []
    for (init, n), runs in ex.ablation_grid(cfg, base).items():
        for r in runs:
            rows.append((init, n, r.seed, r.held_in, r.held_out))
        print(f"{init} N={n}: held-in {ex.median([r.held_in for r in runs]):.4f} "
              f"held-out {ex.median([r.held_out for r in runs]):.4f}")
    _write_csv(out / "ablation.csv", ("init", "n_blocks", "seed", "held_in", "held_out"), rows)


def cmd_analyze(cfg, args):
    out = _out(cfg) / "analysis"
    out.mkdir(exist_ok=True)
    if args.flops is not None:
        pts = np.loadtxt(args.flops, delimiter=",", skiprows=1, ndmin=2)
        fit = ek.fit_flops_curve(pts[:, :2])
        (out / "flops_fit.json").write_text(json.dumps(
            {"a": fit.a, "b": fit.b, "d": fit.d, "r_squared": fit.r_squared}, indent=2, sort_keys=True) + "\n")
        print(f"fit a={fit.a:.4f} b={fit.b:.4f} d={fit.d:.6f} R2={fit.r_squared:.6f}")
    if args.checkpoint is None:
        if args.flops is None:
            raise ConfigError("analyze needs --checkpoint and/or --flops")
        return
    base = _base(cfg, args)
    hyper = ex.load_hypernet(args.checkpoint)
    data = ex.make_data(cfg)
    tasks = data.eval_in + data.eval_out
    vecs = ek.HypernetMethod(hyper, base, cfg.layer).vectors(tasks)
    ids = [t.concept_id for t in tasks]
    order, mat = ek.cosine_similarity_matrix(vecs, ids)
    (out / "cosine.json").write_text(json.dumps({"concepts": order, "matrix": np.round(mat, 8).tolist()}) + "\n")
    res = ek.pca(vecs, 2)
    _write_csv(out / "pca.csv", ("concept_id", "family", "pc1", "pc2"),
               [(c, cl.get_concept(c).family, float(p[0]), float(p[1])) for c, p in zip(ids, res.projections)])
    if hyper.config.has_cross:
        t = tasks[0]
        dump = ek.dump_attention(hyper, t.s, t.x, base, cfg.layer)
        (out / "attention.json").write_text(json.dumps(dump) + "\n")
    print(out)


HANDLERS = {"pretrain": cmd_pretrain, "gen-data": cmd_gen_data, "train": cmd_train, "train-baseline": cmd_train_baseline,
            "eval": cmd_eval, "scale-sweep": cmd_scale_sweep, "ablate": cmd_ablate, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"steernet: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"steernet: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"steernet: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        log.exception("%s failed", args.command)
        print(f"steernet: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
