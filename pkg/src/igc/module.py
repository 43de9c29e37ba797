"""Input Mapping, Output Mapping and the host wrapper that wires them in.

The host runs its first ``insertion_layer`` blocks; the Input Mapping reads the states
before the anchor and emits a CalcRequest; the calculator (numpy, so no
gradient crosses it) returns a one-hot result; the Output Mapping adds a
gated, per-token residual to every position at or after the anchor; the
remaining host blocks then run unchanged.

Modes: ``igc`` (calculator only), ``igc+shortcut`` (calculator plus a
differentiable path from Input Mapping features), ``shortcut-only``
(no calculator) and ``plain`` (host alone).
"""
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import codec
from . import engine as E
from .calculator import CalcRequest, CalcResult, Calculator, ground_truth_result
from .engine import DiffArray
from .grammar import OPS
from .model import FrozenError, HostDims, HostModel
from .tokenizer import default_vocab

IGC, HYBRID, SHORTCUT, PLAIN = "igc", "igc+shortcut", "shortcut-only", "plain"
MODES = (IGC, HYBRID, SHORTCUT, PLAIN)
READ_CLASSES = 11   # the Output Mapping reads every block in the 11-class space
N_READ = 3          # digits per host number token


@dataclass
class IGCConfig:
    mode: str = IGC
    insertion_layer: int = 1
    width: int = 10
    alignment: str = codec.LEFT
    division: str = "exact"
    d_feat: int = 128
    d_key: int = 32
    d_slot: int = 128
    window: int = 4
    d_short: int = 64
    gate_bias: float = -4.0
    recognizer: bool = True
    out_scale: float = 32.0
    unfreeze_base: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.alignment not in (codec.LEFT, codec.RIGHT):
            raise ValueError(f"unknown alignment {self.alignment!r}")


class MissingAnchorError(ValueError):
    pass


def freeze_base(host, unfreeze=False):
    """Mark every host parameter frozen; only a pretrained host may be frozen."""
    if not host.pretrained:
        raise FrozenError("host has no pretrained weights; run `igc pretrain` and load its checkpoint first")
    host.freeze(not unfreeze)
    return host


class IgcCache:
    """Per-stream memo of Input Mapping + calculator outputs keyed by (sequence id, anchor)."""

    def __init__(self):
        self.entries = {}
        self.executions = Counter()

    def get(self, key):
        return self.entries.get(key)

    def put(self, key, value):
        self.entries[key] = value
        self.executions[key[0]] += 1

    def __len__(self):
        return len(self.entries)


@dataclass
class InputOut:
    digits: DiffArray   # [B, 2W, C] logits, operand A slots then operand B slots
    op: DiffArray       # [B, 4] logits
    z: DiffArray        # [B, 2W + 1, d_slot] pre-classification features

    def request(self, alignment):
        d = _softmax_np(self.digits.data)
        W = d.shape[1] // 2
        return CalcRequest(d[:, :W], d[:, W:], _softmax_np(self.op.data), alignment)


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _param(rng, shape, std):
    return DiffArray(rng.normal(0.0, std, size=shape), requires_grad=True)


def _const(shape, value=0.0):
    return DiffArray(np.full(shape, value))


def _shift(x, k):
    """Move ``x[B, T, d]`` k steps later in time, zero-filling the start."""
    B, T, d = x.shape
    if k == 0:
        return x
    if k >= T:
        return _const((B, T, d))
    return E.concat([_const((B, k, d)), x[:, :T - k]], axis=1)


class IGCModel:
    def __init__(self, host, cfg=None, seed=0, calculator=None, vocab=None):
        self.host = host
        self.cfg = cfg or IGCConfig()
        c = self.cfg
        vocab = vocab or default_vocab()
        self.eos_id, self.anchor_id = vocab.eos_id, vocab.anchor_id
        self.vocab = vocab
        if not 1 <= c.insertion_layer <= host.dims.n_layers:
            raise ValueError(f"insertion_layer {c.insertion_layer} outside 1..{host.dims.n_layers}")
        self.calculator = calculator or Calculator(c.width, c.alignment, c.division)
        self.gate_override = None
        self.params = self._init_params(np.random.default_rng(seed)) if c.mode != PLAIN else {}

    # -- construction ------------------------------------------------------

    @property
    def n_in_classes(self):
        return codec.n_classes(self.cfg.alignment)

    @property
    def summary_size(self):
        return self.cfg.width * READ_CLASSES + 2 + len(OPS) + 1

    def _init_params(self, rng):
        c, d = self.cfg, self.host.dims.d_model
        W, S, C, V = c.width, 2 * c.width + 1, self.n_in_classes, self.host.dims.vocab
        ctx = self.host.dims.ctx
        nread = N_READ * (W + 1)
        d_in = d + (N_READ * READ_CLASSES if c.recognizer else 0)
        p = {
            "in.ln.g": DiffArray(np.ones(d), True), "in.ln.b": DiffArray(np.zeros(d), True),
            "in.w_mix": _param(rng, (c.window * d_in, c.d_feat), (c.window * d_in) ** -0.5),
            "in.b_mix": DiffArray(np.zeros(c.d_feat), True),
            "in.w_k": _param(rng, (c.d_feat, c.d_key), c.d_feat ** -0.5),
            "in.w_q": _param(rng, (d, c.d_key), d ** -0.5),
            "in.seeds": _param(rng, (S, c.d_key), 1.0),
            "in.w_z": _param(rng, (c.d_feat, c.d_slot), c.d_feat ** -0.5),
            "in.b_z": DiffArray(np.zeros(c.d_slot), True),
            "in.w_slot": _param(rng, (2 * W, c.d_slot, C), c.d_slot ** -0.5),
            "in.b_slot": DiffArray(np.zeros((2 * W, 1, C)), True),
            "in.w_op": _param(rng, (c.d_slot, len(OPS)), c.d_slot ** -0.5),
            "in.b_op": DiffArray(np.zeros(len(OPS)), True),
            "out.ln.g": DiffArray(np.ones(d), True), "out.ln.b": DiffArray(np.zeros(d), True),
            "out.read_table": _param(rng, (2 * ctx, nread), 0.1),
            "out.read_h": _param(rng, (d, nread), 0.01),
            "out.read_c": _param(rng, (self.summary_size, nread), 0.01),
            "out.score": DiffArray(self._score_init(rng, V), True),
            "out.score_table": _param(rng, (2 * ctx, V), 0.01),
            "out.emb": DiffArray(self._emb_init(), True),
            "out.gate_h": _param(rng, (d, 1), 0.01),
            "out.gate_c": _param(rng, (self.summary_size, 1), 0.01),
            "out.gate_b": DiffArray(np.full(1, c.gate_bias), True),
        }
        if c.recognizer:
            # token recognizer: keys start from the frozen input embedding so
            # that layer-1 states already select their own token
            p["in.rec_k"] = DiffArray(0.5 * self.host.params["tok_emb"].data.T.copy(), True)
            p["in.rec_d"] = _param(rng, (V, N_READ * READ_CLASSES), 1.0)
        if c.mode in (HYBRID, SHORTCUT):
            p.update({
                "sc.ln.g": DiffArray(np.ones(S * c.d_slot), True),
                "sc.ln.b": DiffArray(np.zeros(S * c.d_slot), True),
                "sc.w1": _param(rng, (S * c.d_slot, c.d_short), (S * c.d_slot) ** -0.5),
                "sc.b1": DiffArray(np.zeros(c.d_short), True),
                "sc.w2": _param(rng, (c.d_short, W * READ_CLASSES + 2), c.d_short ** -0.5),
                "sc.b2": DiffArray(np.zeros(W * READ_CLASSES + 2), True),
            })
        if c.mode == HYBRID:
            p["sc.kappa"] = DiffArray(np.full(1, 5.0), True)
        for k, v in p.items():
            v.name = k
        return p

    def _score_init(self, rng, V, beta=6.0):
        """Digit-to-token scorer, started at the vocabulary's digit composition.

        Number token ``"45"`` gets ``beta`` from digit 4 in read position 0,
        digit 5 in position 1 and the placeholder in position 2; EOS gets
        ``beta`` from three placeholders.  Falls back to noise when the
        vocabulary does not describe the host's token ids.
        """
        w = rng.normal(0.0, 0.1, (N_READ * READ_CLASSES, V))
        tokens = getattr(self.vocab, "tokens", None)
        if tokens is None or len(tokens) != V:
            return w
        for i, tok in enumerate(tokens):
            if tok.isdigit():
                chars = [int(ch) for ch in tok] + [codec.PLACEHOLDER] * (N_READ - len(tok))
            elif i == self.eos_id:
                chars = [codec.PLACEHOLDER] * N_READ
            else:
                continue
            for k, cls in enumerate(chars):
                w[k * READ_CLASSES + cls, i] += beta
        return w

    def _emb_init(self):
        """Token vectors along the host's unembedding directions, so that an
        open gate pushes the frozen upper blocks towards the scored token."""
        u = self.host.params["unembed"].data.T
        return np.ascontiguousarray(self.cfg.out_scale * u / np.linalg.norm(u, axis=1, keepdims=True))

    # per-token lookup tables see each row rarely, so they take larger steps
    TABLES = ("in.rec_d", "out.read_table", "out.score", "out.score_table", "out.emb")

    def lr_scale(self, factor):
        return {k: factor for k in self.TABLES if k in self.params}

    def trainable(self):
        out = dict(self.params)
        out.update({f"host.{k}": v for k, v in self.host.trainable().items()})
        return out

    def n_trainable(self):
        return sum(v.size for v in self.trainable().values())

    def param_report(self):
        groups = Counter()
        for k, v in self.params.items():
            groups[k.split(".")[0]] += v.size
        return {"input_mapping": groups["in"], "output_mapping": groups["out"], "shortcut": groups["sc"],
                "host_total": self.host.n_params(),
                "host_trainable": sum(v.size for v in self.host.trainable().values()),
                "trainable": self.n_trainable()}

    # -- host pieces -------------------------------------------------------

    def lower(self, ids):
        """Host states after the first ``insertion_layer`` blocks."""
        return self.host.run_blocks(self.host.embed(ids), 0, self.cfg.insertion_layer)

    def upper(self, h):
        return self.host.run_blocks(h, self.cfg.insertion_layer, self.host.dims.n_layers)

    # -- Input Mapping -----------------------------------------------------

    def input_mapping(self, h, anchors):
        """Anchor-queried attention over positions strictly before each anchor."""
        p, c = self.params, self.cfg
        B, T, d = h.shape
        anchors = np.asarray(anchors)
        x = E.layer_norm(h, p["in.ln.g"], p["in.ln.b"])
        feat = x
        if c.recognizer:
            tok = E.softmax(E.matmul(x, p["in.rec_k"]), axis=-1)
            feat = E.concat([x, E.matmul(tok, p["in.rec_d"])], axis=-1)
        win = E.concat([_shift(feat, k) for k in range(c.window)], axis=-1)
        f = E.relu(E.linear(win, p["in.w_mix"], p["in.b_mix"]))
        keys = E.matmul(f, p["in.w_k"])
        q = E.matmul(x[np.arange(B), anchors], p["in.w_q"])
        S = p["in.seeds"].shape[0]
        q = E.add(E.reshape(q, (B, 1, c.d_key))[:, np.zeros(S, dtype=np.int64)], p["in.seeds"], broadcast=True)
        mask = (np.arange(T)[None, :] < anchors[:, None])[:, None, :]
        att = E.attention(q, keys, f, mask=mask)
        z = E.relu(E.linear(att, p["in.w_z"], p["in.b_z"]))
        W = c.width
        zd = E.transpose(z[:, :2 * W], (1, 0, 2))
        digits = E.add(E.matmul(zd, p["in.w_slot"]), p["in.b_slot"], broadcast=True)
        op = E.linear(z[:, 2 * W], p["in.w_op"], p["in.b_op"])
        return InputOut(E.transpose(digits, (1, 0, 2)), op, z)

    def aux_targets(self, annotations):
        """Slot classes, op classes and masks for ``(op_idx, a, b, result)`` tuples (None for distractors)."""
        W, B = self.cfg.width, len(annotations)
        a = np.array([-1 if x is None else x[1] for x in annotations], dtype=np.int64)
        b = np.array([-1 if x is None else x[2] for x in annotations], dtype=np.int64)
        digits = np.concatenate([codec.encode_classes(a, W, self.cfg.alignment),
                                 codec.encode_classes(b, W, self.cfg.alignment)], axis=1)
        is_arith = np.array([x is not None for x in annotations])
        op = np.array([0 if x is None else x[0] for x in annotations], dtype=np.int64)
        # distractors teach the all-placeholder (EMPTY) block where one exists
        dmask = np.ones((B, 2 * W), dtype=bool) if self.cfg.alignment == codec.LEFT \
            else np.repeat(is_arith[:, None], 2 * W, axis=1)
        return digits, dmask, op, is_arith

    def aux_loss(self, inp, annotations):
        """Summed slot-wise cross-entropy, averaged over the batch."""
        digits, dmask, op, omask = self.aux_targets(annotations)
        B = len(annotations)
        loss = E.cross_entropy(inp.digits, digits, dmask, reduction="sum")
        loss = loss + E.cross_entropy(inp.op, op, omask, reduction="sum")
        return loss * (1.0 / B)

    # -- calculator side ---------------------------------------------------

    def _block11(self, mag):
        """Pad 10-class (right-aligned) blocks with an empty placeholder column."""
        mag = np.asarray(mag, dtype=np.float64)
        if mag.shape[-1] == READ_CLASSES:
            return mag
        return np.concatenate([mag, np.zeros(mag.shape[:-1] + (1,))], axis=-1)

    def result_payload(self, res, inp=None):
        """Block, sign and summary features handed to the Output Mapping.

        ``res`` is a CalcResult (or None in shortcut-only); ``inp`` is needed
        whenever a shortcut is active.
        """
        mode, W = self.cfg.mode, self.cfg.width
        B = len(res) if res is not None else inp.op.shape[0]
        if res is not None:
            block = self._block11(res.magnitude)
            op = np.eye(len(OPS))[res.op]
            valid = res.valid[:, None].astype(np.float64)
        if mode == IGC:
            blk, sgn = DiffArray(block), DiffArray(res.sign)
            op, valid = DiffArray(op), DiffArray(valid)
        else:
            p = self.params
            flat = E.reshape(inp.z, (B, -1))
            # normalized input: the aux loss keeps growing z, which would
            # otherwise saturate the payload softmax and cut off its gradient
            flat = E.layer_norm(flat, p["sc.ln.g"], p["sc.ln.b"])
            hs = E.relu(E.linear(flat, p["sc.w1"], p["sc.b1"]))
            out = E.linear(hs, p["sc.w2"], p["sc.b2"])
            blk_logits = E.reshape(out[:, :W * READ_CLASSES], (B, W, READ_CLASSES))
            sgn_logits = out[:, W * READ_CLASSES:]
            if mode == HYBRID:
                k = p["sc.kappa"]
                blk_logits = E.add(blk_logits, E.mul(DiffArray(block), k, broadcast=True))
                sgn_logits = E.add(sgn_logits, E.mul(DiffArray(res.sign), k, broadcast=True))
                op, valid = DiffArray(op), DiffArray(valid)
            else:
                op = E.softmax(inp.op)
                valid = _const((B, 1))
            blk, sgn = E.softmax(blk_logits), E.softmax(sgn_logits)
        summary = E.concat([E.reshape(blk, (B, W * READ_CLASSES)), sgn, op, valid], axis=1)
        return blk, sgn, summary

    # -- Output Mapping ----------------------------------------------------

    def output_mapping(self, h, anchors, lengths, blk, sgn, summary, return_gates=False):
        """``h + mask(p >= t) * gate * projection``; rows before the anchor are untouched."""
        p, c = self.params, self.cfg
        B, T, d = h.shape
        W, ctx = c.width, self.host.dims.ctx
        anchors, lengths = np.asarray(anchors), np.asarray(lengths)
        bi, pi = live_rows(anchors, lengths, T)
        N = len(bi)
        if N == 0:
            return (h, _const((0, 1))) if return_gates else h
        off = np.clip(pi - anchors[bi], 0, ctx - 1)

        x = E.layer_norm(h[bi, pi], p["out.ln.g"], p["out.ln.b"])          # [N, d]
        s_rows = summary[bi]
        neg = E.reshape(sgn[bi][:, 1], (N, 1))
        pos_w = 1.0 - neg

        def by_offset(table):
            return E.add(E.mul(table[2 * off], pos_w, broadcast=True),
                         E.mul(table[2 * off + 1], neg, broadcast=True))

        # which result slot (or none) feeds each digit of the emitted token
        read = by_offset(p["out.read_table"]) + E.matmul(x, p["out.read_h"]) + E.matmul(s_rows, p["out.read_c"])
        alpha = E.softmax(E.reshape(read, (N, N_READ, W + 1)))
        empty = np.zeros((N, 1, READ_CLASSES))
        empty[:, :, codec.PLACEHOLDER] = 1.0
        slots = E.concat([blk[bi], DiffArray(empty)], axis=1)                 # [N, W+1, 11]
        digits = E.reshape(E.matmul(alpha, slots), (N, N_READ * READ_CLASSES))

        score = E.matmul(digits, p["out.score"]) + by_offset(p["out.score_table"])
        proj = E.matmul(E.softmax(score), p["out.emb"])                       # [N, d]

        if self.gate_override is not None:
            gate = _const((N, 1), self.gate_override)
        else:
            glog = E.matmul(x, p["out.gate_h"]) + E.matmul(s_rows, p["out.gate_c"])
            gate = E.sigmoid(E.add(glog, p["out.gate_b"], broadcast=True))
        delta = E.mul(proj, gate, broadcast=True)

        index = np.zeros((B, T), dtype=np.int64)
        index[bi, pi] = np.arange(1, N + 1)
        full = E.concat([_const((1, d)), delta], axis=0)[index]
        out = h + full
        if return_gates:
            return out, gate
        return out

    # -- full passes -------------------------------------------------------

    def _check_anchors(self, anchors, annotations):
        for i, (t, a) in enumerate(zip(anchors, annotations)):
            if t is None or t < 0:
                if a is not None:
                    raise MissingAnchorError(f"arithmetic sample {i} has no anchor token")

    def forward_hidden(self, h_low, anchors, lengths, annotations=None, result=None, return_gates=False):
        """Apply the IGC to lower-layer states and run the upper blocks.

        ``annotations`` switch on teacher substitution (training); otherwise
        ``result`` must hold the calculator output.  Returns the final
        hidden states, the Input Mapping output and optionally the gate
        array (one row per position at or after an anchor).
        """
        h = h_low if isinstance(h_low, DiffArray) else DiffArray(h_low)
        if self.cfg.mode == PLAIN:
            return self.upper(h), None, None
        inp = self.input_mapping(h, anchors)
        if self.cfg.mode != SHORTCUT and result is None:
            if annotations is None:
                raise ValueError("forward_hidden needs annotations (training) or a calculator result")
            result = ground_truth_result(
                [(0, -1, -1, None) if a is None else tuple(a) for a in annotations],
                self.cfg.width, self.cfg.alignment)
        blk, sgn, summary = self.result_payload(result if self.cfg.mode != SHORTCUT else None, inp)
        res = self.output_mapping(h, anchors, lengths, blk, sgn, summary, return_gates)
        h2, gates = res if return_gates else (res, None)
        return self.upper(h2), inp, gates

    def forward_train(self, ids, anchors, lengths, annotations, h_low=None, rows=None, return_gates=False):
        """Training pass with teacher substitution.

        Returns ``(logits, InputOut)``, plus the gate array when asked;
        ``logits`` cover ``rows`` (an index pair ``(b, p)``) when given,
        otherwise every position.
        """
        self._check_anchors(anchors, annotations)
        if h_low is None:
            h_low = self.lower(ids)
        hid, inp, gates = self.forward_hidden(h_low, anchors, lengths, annotations, return_gates=return_gates)
        if rows is not None:
            hid = hid[rows]
        if return_gates:
            return self.host.head(hid), inp, gates
        return self.host.head(hid), inp

    # -- generation --------------------------------------------------------

    def run_igc(self, h, anchors, seq_ids=None, cache=None):
        """Input Mapping + calculator at the anchor, memoized in ``cache``."""
        if self.cfg.mode == SHORTCUT:
            return self.input_mapping(h, anchors), None
        keys = None if cache is None else [(s, int(t)) for s, t in zip(seq_ids, anchors)]
        if keys is not None and all(cache.get(k) is not None for k in keys):
            hits = [cache.get(k) for k in keys]
            return _stack_inputs([x[0] for x in hits]), _stack_results([x[1] for x in hits])
        inp = self.input_mapping(h, anchors)
        res = self.calculator(inp.request(self.cfg.alignment))
        if keys is not None:
            for i, k in enumerate(keys):
                cache.put(k, (_row_input(inp, i), _row_result(res, i)))
        return inp, res

    def step_hidden(self, ids, anchors, seq_ids=None, cache=None, return_gates=False):
        """Inference pass over ``ids[B, T]`` that share one anchor layout."""
        h = self.lower(ids)
        B, T = ids.shape
        lengths = np.full(B, T)
        if self.cfg.mode == PLAIN or anchors is None:
            return self.upper(h), None
        inp, res = self.run_igc(h, anchors, seq_ids, cache)
        blk, sgn, summary = self.result_payload(res, inp)
        out = self.output_mapping(h, anchors, lengths, blk, sgn, summary, return_gates)
        if return_gates:
            return self.upper(out[0]), out[1].data[:, 0]
        return self.upper(out), None

    def generate(self, prompts, max_new=8, cache=None, use_cache=True, seq_ids=None):
        """Greedy continuation of token-id prompts; returns new ids up to (excluding) EOS."""
        seq_ids = list(range(len(prompts))) if seq_ids is None else list(seq_ids)
        if use_cache and cache is None:
            cache = IgcCache()
        anchors = [_anchor_of(p, self.anchor_id) for p in prompts]
        buckets = {}
        for i, p in enumerate(prompts):
            buckets.setdefault((len(p), anchors[i]), []).append(i)
        out = [None] * len(prompts)
        with E.no_grad():
            for (L, t), idx in sorted(buckets.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
                ids = np.array([prompts[i] for i in idx], dtype=np.int64)
                done = np.zeros(len(idx), dtype=bool)
                gen = [[] for _ in idx]
                sids = [seq_ids[i] for i in idx]
                anc = None if t is None else np.full(len(idx), t)
                for _ in range(max_new):
                    if ids.shape[1] >= self.host.dims.ctx:
                        break
                    hid, _ = self.step_hidden(ids, anc, sids, cache if use_cache else None)
                    logits = self.host.head(hid[:, -1])
                    nxt = logits.data.argmax(axis=-1)
                    for j, tok in enumerate(nxt):
                        if not done[j]:
                            if tok == self.eos_id:
                                done[j] = True
                            else:
                                gen[j].append(int(tok))
                    if done.all():
                        break
                    ids = np.concatenate([ids, nxt[:, None]], axis=1)
                for j, i in enumerate(idx):
                    out[i] = gen[j]
        return out

    def gate_report(self, ids, anchor):
        """Gate value for every post-anchor token of one sequence."""
        ids = np.asarray(ids, dtype=np.int64)[None]
        if self.cfg.mode == PLAIN:
            return np.zeros(0)
        with E.no_grad():
            _, gates = self.step_hidden(ids, np.array([anchor]), return_gates=True)
        return gates

    # -- persistence -------------------------------------------------------

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays):
        for k, v in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks IGC parameter {k!r}")
            if arrays[k].shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {v.shape}")
            v.data = np.array(arrays[k], dtype=np.float64)

    def save(self, path, meta=None):
        arrays = {f"igc.{k}": v for k, v in self.state().items()}
        arrays.update({f"host.{k}": v for k, v in self.host.state().items()})
        meta = {"igc": asdict(self.cfg), "dims": asdict(self.host.dims), **(meta or {})}
        return E.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, vocab=None):
        arrays, meta = E.load_checkpoint(path)
        host = HostModel(HostDims(**meta["dims"]))
        host.load_state({k[5:]: v for k, v in arrays.items() if k.startswith("host.")})
        host.pretrained = True
        model = cls(host, IGCConfig(**meta["igc"]), vocab=vocab)
        model.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("igc.")})
        return model, meta


def live_rows(anchors, lengths, T):
    """Index pair ``(b, p)`` of every position at or after its anchor, in gate order."""
    pos = np.arange(T)[None, :]
    return np.nonzero((pos >= np.asarray(anchors)[:, None]) & (pos < np.asarray(lengths)[:, None]))


def _anchor_of(ids, anchor_id):
    hits = [i for i, x in enumerate(ids) if x == anchor_id]
    return hits[-1] if hits else None


def _row_input(inp, i):
    return InputOut(DiffArray(inp.digits.data[i:i + 1]), DiffArray(inp.op.data[i:i + 1]),
                    DiffArray(inp.z.data[i:i + 1]))


def _stack_inputs(rows):
    return InputOut(*(DiffArray(np.concatenate([getattr(r, f).data for r in rows])) for f in ("digits", "op", "z")))


def _row_result(res, i):
    return CalcResult(res.magnitude[i:i + 1], res.sign[i:i + 1], res.op[i:i + 1], res.a[i:i + 1],
                      res.b[i:i + 1], res.values[i:i + 1], res.flags[i:i + 1], res.alignment)


def _stack_results(rows):
    cat = np.concatenate
    return CalcResult(cat([r.magnitude for r in rows]), cat([r.sign for r in rows]), cat([r.op for r in rows]),
                      cat([r.a for r in rows]), cat([r.b for r in rows]), sum((r.values for r in rows), []),
                      cat([r.flags for r in rows]), rows[0].alignment)
