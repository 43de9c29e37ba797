"""Base pretraining, IGC finetuning with teacher substitution, and evaluation."""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine as E
from .grammar import OP_SYMBOLS, OP_WORDS, OPS
from .model import HostDims, HostModel
from .module import IGCModel, freeze_base, live_rows
from .tokenizer import default_vocab, detokenize

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class MissingAnnotationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def pad_ids(seqs, pad_id):
    lengths = np.array([len(s) for s in seqs])
    out = np.full((len(seqs), lengths.max()), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def annotation_tuples(records):
    out = []
    for r in records:
        if r.annotation is None:
            if r.template != "distractor":
                raise MissingAnnotationError(f"arithmetic record {r.prompt!r} carries no annotation")
            out.append(None)
        else:
            a = r.annotation
            out.append((a.op_index, a.a, a.b, a.result))
    return out


def target_rows(lengths, starts):
    """Index pairs (b, p) with ``starts[b] <= p <= lengths[b] - 2`` and their next-token positions."""
    T = lengths.max()
    pos = np.arange(T)[None, :]
    m = (pos >= np.asarray(starts)[:, None]) & (pos <= lengths[:, None] - 2)
    return np.nonzero(m)


def batches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def make_optimizer(params, tc, lr_scale=None, total_steps=None):
    decay = total_steps if tc.schedule == "cosine" else None
    return E.make_optimizer(tc.optimizer, params, tc.lr, warmup=tc.warmup, clip_norm=tc.clip_norm,
                            lr_scale=lr_scale, decay_steps=decay)


def _fill_missing_grads(params):
    # parameters outside the loss graph (e.g. the Input Mapping when lambda_aux = 0) get an exact zero
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    arm: str
    seed: int
    epoch: int
    split: str
    acc_ADD: float = float("nan")
    acc_SUB: float = float("nan")
    acc_MUL: float = float("nan")
    acc_DIV: float = float("nan")
    overall: float = float("nan")
    n: int = 0
    aux_loss: float = float("nan")
    lm_loss: float = float("nan")
    gate_distractor: float = float("nan")
    wall: float = 0.0

    def acc(self, op):
        return getattr(self, f"acc_{op}")


METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


class MetricsLog:
    """Append-only CSV + JSON-lines sink."""

    def __init__(self, directory=None, stem="metrics"):
        self.rows = []
        self.csv = self.jsonl = None
        if directory is not None:
            d = Path(directory)
            d.mkdir(parents=True, exist_ok=True)
            self.csv, self.jsonl = d / f"{stem}.csv", d / f"{stem}.jsonl"
            if not self.csv.exists():
                with open(self.csv, "w", newline="") as fh:
                    csv.writer(fh).writerow(METRIC_FIELDS)

    def append(self, row):
        self.rows.append(row)
        if self.csv is not None:
            with open(self.csv, "a", newline="") as fh:
                csv.writer(fh).writerow([getattr(row, k) for k in METRIC_FIELDS])
            with open(self.jsonl, "a") as fh:
                fh.write(json.dumps(asdict(row)) + "\n")


def read_metrics(path):
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            kw = {}
            for f in fields(MetricsRow):
                v = d[f.name]
                kw[f.name] = v if f.type is str or f.type == "str" else (int(v) if f.name in ("seed", "epoch", "n") else float(v))
            rows.append(MetricsRow(**kw))
    return rows


# ---------------------------------------------------------------------------
# base pretraining
# ---------------------------------------------------------------------------


def build_host(cfg, vocab=None):
    vocab = vocab or default_vocab()
    h = cfg.host
    return HostModel(HostDims(len(vocab), h.d_model, h.n_layers, h.n_heads, h.d_ff, h.ctx), seed=h.seed)


def lm_loss_full(host, ids, lengths):
    rows = target_rows(lengths, np.zeros(len(lengths), dtype=np.int64))
    logits = host.forward(ids)
    return E.cross_entropy(logits[rows], ids[rows[0], rows[1] + 1])


def template_perplexity(host, records, vocab=None, batch_size=256):
    """Perplexity over the fixed words of the arithmetic templates.

    Numbers, the operator and the first prompt word are sampled by the
    generator rather than implied by the template, so they are left out, as
    are distractor records.
    """
    vocab = vocab or default_vocab()
    drawn = set(OP_SYMBOLS.values()) | {w.split()[0] for w in OP_WORDS.values()}
    skip = np.array([vocab.is_number(i) or vocab.tokens[i] in drawn for i in range(len(vocab))])
    records = [r for r in records if r.template != "distractor"]
    total, count = 0.0, 0
    with E.no_grad():
        for idx in batches(len(records), batch_size):
            ids, lengths = pad_ids([records[i].ids for i in idx], vocab.pad_id)
            rows = target_rows(lengths, np.zeros(len(idx), dtype=np.int64))
            tgt = ids[rows[0], rows[1] + 1]
            keep = ~skip[tgt] & (rows[1] > 0)
            logp = E.log_softmax(host.forward(ids)[rows]).data
            total -= logp[np.arange(len(tgt)), tgt][keep].sum()
            count += keep.sum()
    return math.exp(total / max(count, 1))


def pretrain_base(cfg, corpus, ckpt_path=None, vocab=None, progress=None):
    """Train the plain host on the guessed-answer corpus.

    A non-finite loss restores the last good weights, saves them and raises
    DivergenceError.
    """
    vocab = vocab or default_vocab()
    pc = cfg.pretrain
    host = build_host(cfg, vocab)
    opt = E.Adam(host.params, pc.lr, warmup=pc.warmup, clip_norm=pc.clip_norm)
    rng = np.random.default_rng(cfg.host.seed)
    history = []
    good = {k: v.copy() for k, v in host.state().items()}
    for epoch in range(1, pc.epochs + 1):
        t0 = time.time()
        losses = []
        for idx in batches(len(corpus), pc.batch_size, rng):
            ids, lengths = pad_ids([corpus[i].ids for i in idx], vocab.pad_id)
            opt.zero_grad()
            loss = lm_loss_full(host, ids, lengths)
            if not np.isfinite(loss.data):
                host.load_state(good)
                host.pretrained = True
                if ckpt_path:
                    host.save(ckpt_path, meta={"epoch": epoch - 1, "diverged": True})
                raise DivergenceError(f"pretraining loss became {float(loss.data)} in epoch {epoch}; "
                                      f"last good weights from epoch {epoch - 1} kept")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        good = {k: v.copy() for k, v in host.state().items()}
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "wall": time.time() - t0})
        if progress:
            progress(history[-1])
    host.pretrained = True
    if ckpt_path:
        host.save(ckpt_path, meta={"epoch": pc.epochs, "history": history})
    return host, history


# ---------------------------------------------------------------------------
# IGC finetuning
# ---------------------------------------------------------------------------


class LowerCache:
    """Frozen-host states below the insertion point, one array per record."""

    def __init__(self, model, records, pad_id, batch_size=256):
        self.states = [None] * len(records)
        with E.no_grad():
            for idx in batches(len(records), batch_size):
                ids, lengths = pad_ids([records[i].ids for i in idx], pad_id)
                h = model.lower(ids).data
                for j, i in enumerate(idx):
                    self.states[i] = h[j, :lengths[j]]

    def batch(self, idx, T):
        d = self.states[idx[0]].shape[1]
        out = np.zeros((len(idx), T, d))
        for j, i in enumerate(idx):
            s = self.states[i]
            out[j, :len(s)] = s
        return out


def igc_step(model, records, idx, vocab, lambda_aux, lower=None, lambda_gate=0.0):
    """Loss graph for one batch.

    LM cross-entropy on post-anchor targets, plus ``lambda_aux`` times the
    auxiliary loss, plus ``lambda_gate`` times the mean gate over the
    post-anchor positions of samples without arithmetic (nothing to inject
    there).  Returns ``(total, lm, aux)``.
    """
    recs = [records[i] for i in idx]
    ids, lengths = pad_ids([r.ids for r in recs], vocab.pad_id)
    anchors = np.array([r.anchor_index for r in recs])
    ann = annotation_tuples(recs)
    rows = target_rows(lengths, anchors)
    h_low = lower.batch(idx, ids.shape[1]) if lower is not None else None
    logits, inp, gates = model.forward_train(ids, anchors, lengths, ann, h_low=h_low, rows=rows, return_gates=True)
    lm = E.cross_entropy(logits, ids[rows[0], rows[1] + 1])
    if inp is None:
        return lm, lm, None
    aux = model.aux_loss(inp, ann)
    total = lm + aux * lambda_aux if lambda_aux else lm
    if lambda_gate:
        bi, _ = live_rows(anchors, lengths, ids.shape[1])
        silent = np.nonzero(np.array([a is None for a in ann])[bi])[0]
        if len(silent):
            total = total + E.mean(gates[silent]) * lambda_gate
    return total, lm, aux


def train_igc(cfg, host, splits, seed, arm=None, metrics=None, vocab=None, eval_split="eval-bigbench",
              progress=None):
    """Finetune a fresh IGC on a frozen host; returns ``(model, rows)``."""
    vocab = vocab or default_vocab()
    tc = cfg.train
    arm = arm or cfg.igc.mode
    freeze_base(host, unfreeze=cfg.igc.unfreeze_base)
    model = IGCModel(host, cfg.igc, seed=seed, vocab=vocab)
    params = model.trainable()
    log.info("arm %s seed %d: trainable parameters %s", arm, seed, model.param_report())
    train = splits["train"]
    steps = tc.epochs * -(-len(train) // tc.batch_size)
    opt = make_optimizer(params, tc, model.lr_scale(tc.table_lr_scale), total_steps=steps)
    annotation_tuples(train)
    lower = None if cfg.igc.unfreeze_base else LowerCache(model, train, vocab.pad_id)
    rng = np.random.default_rng(10_000 + seed)
    eval_recs = splits.get(eval_split, [])[:tc.eval_limit] if tc.eval_limit else splits.get(eval_split, [])
    distract = splits.get("eval-distractor", [])
    rows = []
    t_start = time.time()
    for epoch in range(1, tc.epochs + 1):
        lm_sum = aux_sum = 0.0
        nb = 0
        for idx in batches(len(train), tc.batch_size, rng):
            for p in params.values():
                p.grad = None
            total, lm, aux = igc_step(model, train, idx, vocab, tc.lambda_aux, lower, tc.lambda_gate)
            if not np.isfinite(total.data):
                raise DivergenceError(f"IGC loss became {float(total.data)} in epoch {epoch}")
            total.backward()
            _fill_missing_grads(params)
            opt.step()
            lm_sum += float(lm.data)
            aux_sum += float(aux.data) if aux is not None else 0.0
            nb += 1
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            row = evaluate(model, eval_recs, eval_split, arm=arm, seed=seed, epoch=epoch, vocab=vocab)
            row.lm_loss, row.aux_loss = lm_sum / nb, aux_sum / nb
            row.gate_distractor = mean_gate(model, distract, vocab) if distract else float("nan")
            row.wall = time.time() - t_start
            rows.append(row)
            if metrics is not None:
                metrics.append(row)
            if progress:
                progress(row)
    return model, rows


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def answer_text(ids, vocab=None):
    return detokenize(ids, vocab, skip_special=True)


def evaluate(model, records, split, arm="", seed=0, epoch=0, vocab=None, batch_size=256):
    """Greedy generation from each prompt; exact string match per operator."""
    vocab = vocab or default_vocab()
    row = MetricsRow(arm=arm, seed=seed, epoch=epoch, split=split, n=len(records))
    if not records:
        return row
    prompts = [r.ids[:r.anchor_index + 1] for r in records]
    gen = []
    for i in range(0, len(prompts), batch_size):
        gen += model.generate(prompts[i:i + batch_size], seq_ids=range(i, i + min(batch_size, len(prompts) - i)))
    hits = np.array([answer_text(g, vocab) == r.answer for g, r in zip(gen, records)])
    ops = np.array([r.annotation.op if r.annotation else "" for r in records])
    for op in OPS:
        m = ops == op
        if m.any():
            setattr(row, f"acc_{op}", float(hits[m].mean()))
    row.overall = float(hits.mean())
    return row


def match_accuracy(predictions, records):
    """Exact-match rate of answer strings against records."""
    return float(np.mean([p == r.answer for p, r in zip(predictions, records)]))


def mean_gate(model, records, vocab=None, batch_size=256):
    """Average gate over post-anchor tokens, teacher-forced on the full sequences."""
    vocab = vocab or default_vocab()
    if model.cfg.mode == "plain" or not records:
        return 0.0
    vals = []
    with E.no_grad():
        groups = {}
        for i, r in enumerate(records):
            groups.setdefault((len(r.ids), r.anchor_index), []).append(i)
        for (L, t), idx in groups.items():
            ids = np.array([records[i].ids for i in idx], dtype=np.int64)
            _, g = model.step_hidden(ids, np.full(len(idx), t), return_gates=True)
            vals.append(g)
    return float(np.concatenate(vals).mean())
