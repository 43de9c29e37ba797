"""Command-line entry point: ``igc <subcommand> [options]``.

Artifacts live under one output root (``--out``, default ``$IGC_OUT`` or
``./runs``)::

    data/     gen-data        split JSONL files, vocabulary, filter report
    base/     pretrain        base.ckpt, training history, template perplexity
    igc/      train-igc       one directory per (mode, alignment, layer, seed)
    eval/     eval            metrics per (mode, seed, split)
    ablate/   ablate          per-run metrics, curves.csv, report.md
    tokens/   analyze-tokens  chunking report
    gates/    gate-report     per-token gate dumps

Every stage directory holds the resolved ``config.json`` and a
``manifest.json`` with a content hash of its inputs; re-running a stage whose
hash matches is a no-op unless ``--force`` is given.

Exit codes: 0 success, 1 invariant violation or runtime failure, 2 usage error.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data
from .ablate import BASE_ARMS, ablate, write_report
from .config import ConfigError, RunConfig
from .data import InfeasibleConfig
from .model import FrozenError, HostModel
from .module import MODES, PLAIN, IGCModel
from .tokenizer import analyze_chunking, default_vocab, detokenize
from .train import (DivergenceError, MetricsLog, MissingAnnotationError, evaluate, mean_gate,
                    pretrain_base, template_perplexity, train_igc)

log = logging.getLogger("igc")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DATA_FILES = {name: f"{name}.jsonl" for name in (*data.SPLITS, "pretrain")}


class UsageError(Exception):
    """Bad invocation: invalid config, missing prerequisite artifact."""


class InvariantError(Exception):
    """A stage finished but violated one of its own postconditions."""


# ---------------------------------------------------------------------------
# stage bookkeeping
# ---------------------------------------------------------------------------


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Stage:
    """One output directory with its resolved config and manifest."""

    def __init__(self, directory, name, cfg, sections, inputs=(), extra=None, force=False):
        self.dir = Path(directory)
        self.name = name
        self.cfg = cfg
        self.force = force
        self.inputs = {str(p): file_hash(p) for p in inputs}
        payload = {"stage": name, "config": cfg.digest(*sections), "inputs": sorted(self.inputs.values()),
                   "extra": extra or {}}
        self.key = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
        self.t0 = time.time()

    @property
    def manifest_path(self):
        return self.dir / "manifest.json"

    def up_to_date(self):
        if self.force or not self.manifest_path.exists():
            return False
        try:
            m = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError:
            return False
        return m.get("key") == self.key and all((self.dir / f).exists() for f in m.get("outputs", {}))

    def begin(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path.unlink(missing_ok=True)
        self.cfg.save(self.dir / "config.json")

    def finish(self, outputs, info=None):
        files = {str(Path(f).relative_to(self.dir)): file_hash(f) for f in outputs}
        manifest = {"stage": self.name, "key": self.key, "version": __version__,
                    "created": time.strftime("%Y-%m-%dT%H:%M:%S"), "seconds": round(time.time() - self.t0, 1),
                    "inputs": self.inputs, "outputs": files, **(info or {})}
        self.manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def skip_message(stage):
    print(f"{stage.name}: up to date in {stage.dir} (use --force to rerun)")
    return EXIT_OK


def require(path, command):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"missing {path}; run `igc {command}` first (with the same --out and --config)")
    return path


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def load_splits(root, names=data.SPLITS):
    d = Path(root) / "data"
    out = {}
    for name in names:
        _, out[name] = data.load(require(d / DATA_FILES[name], "gen-data"))
    return out


def data_inputs(root, names=data.SPLITS):
    return [require(Path(root) / "data" / DATA_FILES[n], "gen-data") for n in names]


def igc_dir(root, cfg, mode, seed):
    c = cfg.igc
    return Path(root) / "igc" / f"{mode}-{c.alignment}-L{c.insertion_layer}-s{seed}"


def seeds_of(args, cfg):
    return list(args.seed) if args.seed else list(cfg.train.seeds)


def load_model(root, cfg, mode, seed):
    """Plain host for ``plain`` mode, otherwise the trained IGC checkpoint."""
    base = require(Path(root) / "base" / "base.ckpt", "pretrain")
    if mode == PLAIN:
        host = HostModel.load(base)
        return IGCModel(host, cfg.with_overrides(igc={"mode": PLAIN}).igc), base
    ckpt = igc_dir(root, cfg.with_overrides(igc={"mode": mode}), mode, seed) / "igc.ckpt"
    require(ckpt, f"train-igc --mode {mode} --seed {seed}")
    model, _ = IGCModel.load(ckpt)
    return model, ckpt


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    stage = Stage(args.out / "data", "gen-data", cfg, ("data",), force=args.force)
    if stage.up_to_date():
        return skip_message(stage)
    stage.begin()
    vocab = default_vocab()
    splits, report = data.generate(cfg.data, vocab)
    held = {r.annotation.triple() for s in (data.EVAL_BIGBENCH, data.EVAL_ALT) for r in splits[s]}
    splits["pretrain"] = data.pretrain_corpus(cfg.data, exclude=held, vocab=vocab)
    header = {"seed": cfg.data.seed, "config_hash": cfg.digest("data"), "version": __version__}
    outputs = [data.export(recs, stage.dir / DATA_FILES[name], header={**header, "split": name})
               for name, recs in splits.items()]
    (stage.dir / "vocab.json").write_text(vocab.to_json() + "\n")
    rep = report.__dict__ if report is not None else {}
    (stage.dir / "filter_report.json").write_text(json.dumps(rep, indent=2, default=str) + "\n")
    outputs += [stage.dir / "vocab.json", stage.dir / "filter_report.json"]
    counts = {k: len(v) for k, v in splits.items()}
    stage.finish(outputs, {"counts": counts})
    print("gen-data: " + ", ".join(f"{k}={v}" for k, v in counts.items()) + f" -> {stage.dir}")
    return EXIT_OK


def cmd_pretrain(args, cfg):
    inputs = data_inputs(args.out, ("pretrain",))
    stage = Stage(args.out / "base", "pretrain", cfg, ("host", "pretrain"), inputs, force=args.force)
    if stage.up_to_date():
        return skip_message(stage)
    stage.begin()
    _, corpus = data.load(inputs[0])
    ckpt = stage.dir / "base.ckpt"
    host, history = pretrain_base(cfg, corpus, ckpt, progress=lambda h: log.info("pretrain %s", h))
    ppl = template_perplexity(host, corpus[:2000])
    (stage.dir / "history.json").write_text(json.dumps({"history": history, "template_perplexity": ppl}, indent=2) + "\n")
    stage.finish([ckpt, stage.dir / "history.json"], {"template_perplexity": ppl})
    print(f"pretrain: final loss {history[-1]['loss']:.4f}, template perplexity {ppl:.3f} -> {ckpt}")
    return EXIT_OK


def cmd_train_igc(args, cfg):
    if args.mode:
        cfg = cfg.with_overrides(igc={"mode": args.mode})
    if cfg.igc.mode == PLAIN:
        raise UsageError("train-igc needs an IGC mode; plain mode has nothing to train")
    base = require(args.out / "base" / "base.ckpt", "pretrain")
    inputs = [base, *data_inputs(args.out, (data.TRAIN, data.EVAL_BIGBENCH, data.EVAL_DISTRACTOR))]
    splits = None
    for seed in seeds_of(args, cfg):
        stage = Stage(igc_dir(args.out, cfg, cfg.igc.mode, seed), "train-igc", cfg, ("igc", "train"), inputs,
                      extra={"seed": seed}, force=args.force)
        if stage.up_to_date():
            skip_message(stage)
            continue
        splits = splits or load_splits(args.out, (data.TRAIN, data.EVAL_BIGBENCH, data.EVAL_DISTRACTOR))
        stage.begin()
        for f in ("metrics.csv", "metrics.jsonl"):
            (stage.dir / f).unlink(missing_ok=True)
        metrics = MetricsLog(stage.dir)
        model, rows = train_igc(cfg, HostModel.load(base), splits, seed, metrics=metrics,
                                progress=lambda r: log.info("epoch %d overall %.3f gate %.4f",
                                                            r.epoch, r.overall, r.gate_distractor))
        ckpt = model.save(stage.dir / "igc.ckpt", meta={"seed": seed, "epochs": cfg.train.epochs})
        last = rows[-1]
        stage.finish([ckpt, metrics.csv, metrics.jsonl], {"seed": seed, "final_overall": last.overall})
        print(f"train-igc {cfg.igc.mode} seed {seed}: overall {last.overall:.3f} "
              f"(ADD {last.acc_ADD:.3f} MUL {last.acc_MUL:.3f}) -> {stage.dir}")
    return EXIT_OK


def cmd_eval(args, cfg):
    mode = args.mode or cfg.igc.mode
    split = args.split
    if split not in data.SPLITS:
        raise UsageError(f"unknown split {split!r}; expected one of {data.SPLITS}")
    seeds = [0] if mode == PLAIN else seeds_of(args, cfg)
    for seed in seeds:
        model, ckpt = load_model(args.out, cfg, mode, seed)
        inputs = [ckpt, *data_inputs(args.out, (split,))]
        stage = Stage(args.out / "eval" / f"{mode}-s{seed}-{split}", "eval", cfg, ("igc",), inputs,
                      extra={"mode": mode, "split": split, "limit": args.limit}, force=args.force)
        if stage.up_to_date():
            skip_message(stage)
            continue
        stage.begin()
        recs = load_splits(args.out, (split,))[split]
        if args.limit:
            recs = recs[:args.limit]
        row = evaluate(model, recs, split, arm=mode, seed=seed)
        if split == data.EVAL_DISTRACTOR:
            row.gate_distractor = mean_gate(model, recs)
        (stage.dir / "metrics.csv").unlink(missing_ok=True)
        (stage.dir / "metrics.jsonl").unlink(missing_ok=True)
        metrics = MetricsLog(stage.dir)
        metrics.append(row)
        stage.finish([metrics.csv, metrics.jsonl], {"overall": row.overall})
        accs = " ".join(f"{op} {row.acc(op):.3f}" for op in ("ADD", "SUB", "MUL", "DIV") if not np.isnan(row.acc(op)))
        print(f"eval {mode} seed {seed} on {split} (n={row.n}): overall {row.overall:.3f} {accs}".rstrip())
    return EXIT_OK


def cmd_ablate(args, cfg):
    base = require(args.out / "base" / "base.ckpt", "pretrain")
    splits = load_splits(args.out, (data.TRAIN, data.EVAL_BIGBENCH, data.EVAL_DISTRACTOR))
    out = args.out / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    if args.force:
        for done in out.glob("runs/*/done.json"):
            done.unlink()
    rows = ablate(cfg, base, splits, out, arms=args.arms, layers=args.layers, seeds=seeds_of(args, cfg),
                  jobs=args.jobs)
    report = write_report(rows, out)
    print(report.read_text())
    return EXIT_OK


def cmd_analyze_tokens(args, cfg):
    if args.text:
        src = Path(args.text)
        try:
            corpus = src.read_text().splitlines()
        except OSError as e:
            raise UsageError(f"cannot read {src}: {e}") from e
        inputs = [src]
    else:
        inputs = data_inputs(args.out, (data.TRAIN,))
        _, recs = data.load(inputs[0])
        corpus = [r.text for r in recs]
    corpus = [line for line in corpus if line.strip()]
    if not corpus:
        raise UsageError("analyze-tokens needs a non-empty corpus")
    stage = Stage(args.out / "tokens", "analyze-tokens", cfg, (), inputs, force=args.force)
    if stage.up_to_date():
        print((stage.dir / "chunking.txt").read_text())
        return skip_message(stage)
    stage.begin()
    rep = analyze_chunking(corpus)
    (stage.dir / "chunking.json").write_text(rep.to_json() + "\n")
    (stage.dir / "chunking.txt").write_text(rep.to_table() + "\n")
    stage.finish([stage.dir / "chunking.json", stage.dir / "chunking.txt"],
                 {"left_aligned_friendly": rep.left_aligned_friendly})
    print(rep.to_table())
    if not rep.left_aligned_friendly:
        raise InvariantError("most-significant-digit placement is not position-stable")
    return EXIT_OK


def cmd_gate_report(args, cfg):
    mode = args.mode or cfg.igc.mode
    seed = seeds_of(args, cfg)[0]
    model, ckpt = load_model(args.out, cfg, mode, seed)
    names = (data.EVAL_BIGBENCH, data.EVAL_DISTRACTOR)
    stage = Stage(args.out / "gates" / f"{mode}-s{seed}", "gate-report", cfg, ("igc",),
                  [ckpt, *data_inputs(args.out, names)], extra={"n": args.n}, force=args.force)
    if stage.up_to_date():
        print((stage.dir / "gates.txt").read_text())
        return skip_message(stage)
    stage.begin()
    splits = load_splits(args.out, names)
    vocab = default_vocab()
    dump, lines = [], []
    for name in names:
        for r in splits[name][:args.n]:
            gates = model.gate_report(r.ids, r.anchor_index)
            toks = [vocab.tokens[i] for i in r.ids[r.anchor_index:]]
            dump.append({"split": name, "prompt": r.prompt, "answer": r.answer,
                         "tokens": toks, "gates": [float(g) for g in gates]})
            lines.append(f"[{name}] {r.prompt} -> {r.answer}")
            lines.append("  " + "  ".join(f"{t}:{g:.3f}" for t, g in zip(toks, gates)))
    summary = {name: float(np.mean([g for d in dump if d["split"] == name for g in d["gates"]] or [0.0]))
               for name in names}
    lines.append("mean gate: " + ", ".join(f"{k} {v:.4f}" for k, v in summary.items()))
    (stage.dir / "gates.json").write_text(json.dumps({"summary": summary, "samples": dump}, indent=1) + "\n")
    (stage.dir / "gates.txt").write_text("\n".join(lines) + "\n")
    stage.finish([stage.dir / "gates.json", stage.dir / "gates.txt"], {"mean_gate": summary})
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-igc": cmd_train_igc, "eval": cmd_eval,
    "ablate": cmd_ablate, "analyze-tokens": cmd_analyze_tokens, "gate-report": cmd_gate_report,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults apply when omitted)")
    common.add_argument("--out", type=Path, default=None,
                        help="output root (default: $IGC_OUT or ./runs)")
    common.add_argument("--seed", type=int, action="append", help="seed override; repeat for several")
    common.add_argument("--force", action="store_true", help="rerun even when outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="igc", description="Integrated gated calculator experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="generate dataset splits")
    sub.add_parser("pretrain", parents=[common], help="pretrain the plain host")
    s = sub.add_parser("train-igc", parents=[common], help="finetune an IGC on the frozen host")
    s.add_argument("--mode", choices=[m for m in MODES if m != PLAIN])
    s = sub.add_parser("eval", parents=[common], help="greedy exact-match evaluation")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--split", default=data.EVAL_BIGBENCH)
    s.add_argument("--limit", type=int, default=0, help="evaluate only the first N records")
    s = sub.add_parser("ablate", parents=[common], help="run the ablation matrix")
    s.add_argument("--arms", nargs="+", default=list(BASE_ARMS), choices=BASE_ARMS)
    s.add_argument("--layers", nargs="*", type=int, default=[], help="extra insertion layers to sweep")
    s.add_argument("--jobs", type=int, default=1, help="parallel child processes")
    s = sub.add_parser("analyze-tokens", parents=[common], help="digit-to-token chunking report")
    s.add_argument("--text", help="plain-text corpus, one sample per line (default: training split)")
    s = sub.add_parser("gate-report", parents=[common], help="dump per-token gates")
    s.add_argument("--mode", choices=[m for m in MODES if m != PLAIN])
    s.add_argument("-n", type=int, default=5, help="samples per split")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.out = Path(args.out or os.environ.get("IGC_OUT") or "runs")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed:
            cfg = cfg.with_overrides(train={"seeds": list(args.seed)})
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, InfeasibleConfig) as e:
        print(f"igc {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, DivergenceError, MissingAnnotationError, FrozenError, OSError, ValueError) as e:
        print(f"igc {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
