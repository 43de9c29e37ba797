"""Tiny pre-norm decoder-only transformer used as the host language model."""
from dataclasses import asdict, dataclass

import numpy as np

from . import engine as E
from .engine import DiffArray


@dataclass
class HostDims:
    vocab: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    ctx: int = 32


class FrozenError(RuntimeError):
    pass


def _init(rng, shape, std):
    return DiffArray(rng.normal(0.0, std, size=shape), requires_grad=True)


class HostModel:
    def __init__(self, dims, seed=0):
        self.dims = dims
        self.pretrained = False
        rng = np.random.default_rng(seed)
        d, f, L = dims.d_model, dims.d_ff, dims.n_layers
        p = {
            "tok_emb": _init(rng, (dims.vocab, d), 1.0),
            "pos_emb": _init(rng, (dims.ctx, d), 1.0),
        }
        for i in range(L):
            b = f"blocks.{i}."
            p[b + "ln1.g"] = DiffArray(np.ones(d), True)
            p[b + "ln1.b"] = DiffArray(np.zeros(d), True)
            p[b + "attn.w_qkv"] = _init(rng, (d, 3 * d), d ** -0.5)
            p[b + "attn.b_qkv"] = DiffArray(np.zeros(3 * d), True)
            p[b + "attn.w_o"] = _init(rng, (d, d), (2 * L * d) ** -0.5)
            p[b + "attn.b_o"] = DiffArray(np.zeros(d), True)
            p[b + "ln2.g"] = DiffArray(np.ones(d), True)
            p[b + "ln2.b"] = DiffArray(np.zeros(d), True)
            p[b + "mlp.w1"] = _init(rng, (d, f), d ** -0.5)
            p[b + "mlp.b1"] = DiffArray(np.zeros(f), True)
            p[b + "mlp.w2"] = _init(rng, (f, d), (2 * L * f) ** -0.5)
            p[b + "mlp.b2"] = DiffArray(np.zeros(d), True)
        p["ln_f.g"] = DiffArray(np.ones(d), True)
        p["ln_f.b"] = DiffArray(np.zeros(d), True)
        p["unembed"] = _init(rng, (d, dims.vocab), d ** -0.5)
        for k, v in p.items():
            v.name = k
        self.params = p

    # -- forward pieces ---------------------------------------------------

    def embed(self, ids):
        ids = np.asarray(ids)
        T = ids.shape[-1]
        if T > self.dims.ctx:
            raise ValueError(f"sequence length {T} exceeds context {self.dims.ctx}")
        p = self.params
        return E.add(E.embedding(p["tok_emb"], ids), p["pos_emb"][:T], broadcast=True)

    def block(self, x, i):
        p = self.params
        b = f"blocks.{i}."
        B, T, d = x.shape
        H = self.dims.n_heads
        dh = d // H
        h = E.layer_norm(x, p[b + "ln1.g"], p[b + "ln1.b"])
        qkv = E.linear(h, p[b + "attn.w_qkv"], p[b + "attn.b_qkv"])
        qkv = E.transpose(E.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        a = E.attention(qkv[0], qkv[1], qkv[2], causal=True)
        a = E.reshape(E.transpose(a, (0, 2, 1, 3)), (B, T, d))
        x = x + E.linear(a, p[b + "attn.w_o"], p[b + "attn.b_o"])
        h = E.layer_norm(x, p[b + "ln2.g"], p[b + "ln2.b"])
        h = E.relu(E.linear(h, p[b + "mlp.w1"], p[b + "mlp.b1"]))
        return x + E.linear(h, p[b + "mlp.w2"], p[b + "mlp.b2"])

    def run_blocks(self, x, start, stop):
        for i in range(start, stop):
            x = self.block(x, i)
        return x

    def head(self, x):
        p = self.params
        return E.matmul(E.layer_norm(x, p["ln_f.g"], p["ln_f.b"]), p["unembed"])

    def forward(self, ids):
        """Logits ``[B, T, vocab]``."""
        return self.head(self.run_blocks(self.embed(ids), 0, self.dims.n_layers))

    # -- parameter management ---------------------------------------------

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def trainable(self):
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays):
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, v in self.params.items():
            if arrays[k].shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {v.shape}")
            v.data = np.array(arrays[k], dtype=np.float64)

    def save(self, path, meta=None):
        return E.save_checkpoint(path, self.state(), meta={"dims": asdict(self.dims), **(meta or {})})

    @classmethod
    def load(cls, path):
        arrays, meta = E.load_checkpoint(path)
        model = cls(HostDims(**meta["dims"]))
        model.load_state(arrays)
        model.pretrained = True
        return model

    def freeze(self, frozen=True):
        for v in self.params.values():
            v.requires_grad = not frozen
