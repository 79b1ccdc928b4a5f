"""Desk-scale decoder-only transformer standing in for the frozen
general-purpose LM, plus its self-supervised pretraining routine.

Pre-norm blocks, learned absolute positional embeddings (tags occupy ordinary
positions and receive them), untied output projection over the base
vocabulary only, so tag ids can never be emitted.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import AdamW, Tensor, cosine_lr
from .tags import TagTable, read_manifest_bin, write_manifest_bin
from .templates import BOS_ID, EOS_ID, tokenize


class BackboneError(ValueError):
    """Config violations or sequence/vocabulary misuse."""


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 96
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 160
    ff_mult: int = 4
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise BackboneError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "BackboneConfig":
        return BackboneConfig(**obj)


class Backbone:
    """Token + positional embeddings, transformer blocks, final norm, and a
    base-vocab-only output projection."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        d = config.embed_dim
        ff = config.ff_mult * d

        def w(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32))

        self.token_emb = w(config.vocab_size, d)
        self.pos_emb = w(config.context_len, d)
        self.blocks = []
        for _ in range(config.n_layers):
            self.blocks.append(
                {
                    "ln1_g": Tensor(np.ones(d, dtype=np.float32)),
                    "ln1_b": Tensor(np.zeros(d, dtype=np.float32)),
                    "wq": w(d, d),
                    "wk": w(d, d),
                    "wv": w(d, d),
                    "wo": w(d, d),
                    "ln2_g": Tensor(np.ones(d, dtype=np.float32)),
                    "ln2_b": Tensor(np.zeros(d, dtype=np.float32)),
                    "w1": w(d, ff),
                    "b1": Tensor(np.zeros(ff, dtype=np.float32)),
                    "w2": w(ff, d),
                    "b2": Tensor(np.zeros(d, dtype=np.float32)),
                }
            )
        self.ln_f_g = Tensor(np.ones(d, dtype=np.float32))
        self.ln_f_b = Tensor(np.zeros(d, dtype=np.float32))
        self.w_out = w(d, config.vocab_size)

    def parameters(self) -> dict[str, Tensor]:
        params = {"token_emb": self.token_emb, "pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            for key, tensor in blk.items():
                params[f"block{i}.{key}"] = tensor
        params["ln_f_g"] = self.ln_f_g
        params["ln_f_b"] = self.ln_f_b
        params["w_out"] = self.w_out
        return params

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = trainable

    # -- forward ---------------------------------------------------------------

    def embed(self, ids, tag_table: TagTable | None = None) -> Tensor:
        """Mixed id sequence to (n,d): base ids from the token table, tag ids
        from the tag table (a run of a tag's id covers its p rows in order),
        plus positional embeddings for every position including tag positions."""
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[0]
        if n > self.config.context_len:
            raise BackboneError(f"sequence length {n} exceeds context_len {self.config.context_len}")
        v = self.config.vocab_size
        if ids.size and ids.min() < 0:
            raise BackboneError("negative token id")

        parts = []
        i = 0
        while i < n:
            if ids[i] < v:
                j = i
                while j < n and ids[j] < v:
                    j += 1
                parts.append(nm.gather_rows(self.token_emb, ids[i:j]))
                i = j
            else:
                tag_id = int(ids[i])
                if tag_table is None:
                    raise BackboneError(f"tag id {tag_id} in sequence but no tag table supplied")
                spec = tag_table.by_id(tag_id)
                j = i
                while j < n and ids[j] == tag_id:
                    j += 1
                rows = [k % spec.p for k in range(j - i)]
                parts.append(nm.gather_rows(spec.embedding, rows))
                i = j
        tok = nm.concat_rows(parts) if len(parts) > 1 else parts[0]
        pos = nm.gather_rows(self.pos_emb, np.arange(n))
        return nm.add(tok, pos)

    def forward(self, embedded: Tensor) -> tuple[Tensor, Tensor]:
        """(n,d) embedded input -> (logits (n,V), hidden (n,d)). Causal
        attention throughout; hidden is the final-norm output used for head
        readout."""
        cfg = self.config
        h = embedded
        for blk in self.blocks:
            a = nm.layer_norm(h, blk["ln1_g"], blk["ln1_b"], cfg.norm_eps)
            att = nm.causal_attention(
                nm.matmul(a, blk["wq"]), nm.matmul(a, blk["wk"]), nm.matmul(a, blk["wv"]), cfg.n_heads
            )
            h = nm.add(h, nm.matmul(att, blk["wo"]))
            m = nm.layer_norm(h, blk["ln2_g"], blk["ln2_b"], cfg.norm_eps)
            m = nm.matmul(nm.gelu(nm.add(nm.matmul(m, blk["w1"]), blk["b1"])), blk["w2"])
            h = nm.add(h, nm.add(m, blk["b2"]))
        hidden = nm.layer_norm(h, self.ln_f_g, self.ln_f_b, cfg.norm_eps)
        logits = nm.matmul(hidden, self.w_out)
        return logits, hidden


def param_hash(backbone: Backbone) -> str:
    """Stable digest over all backbone parameter bytes, in parameter order."""
    h = hashlib.sha256()
    for name, p in backbone.parameters().items():
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


# -----------------------------------------------------------------------------
# Pretraining
# -----------------------------------------------------------------------------


@dataclass
class PretrainReport:
    steps: int
    first_loss: float
    final_loss: float
    heldout_ce: float
    wall_time_s: float
    loss_curve: list[float]


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1200
    batch_size: int = 16
    lr: float = 2e-3
    warmup_fraction: float = 0.03
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    heldout_fraction: float = 0.05
    log_every: int = 20


def encode_doc(text: str, max_len: int) -> np.ndarray:
    ids = [BOS_ID] + tokenize(text)[: max_len - 2] + [EOS_ID]
    return np.asarray(ids, dtype=np.int64)


def _doc_ce(backbone: Backbone, ids: np.ndarray) -> nm.Tensor:
    x = backbone.embed(ids)
    logits, _ = backbone.forward(x)
    n = len(ids)
    targets = np.roll(ids, -1)
    mask = np.ones(n, dtype=np.float32)
    mask[-1] = 0.0
    return nm.cross_entropy(logits, targets, mask)


def heldout_cross_entropy(backbone: Backbone, docs: list[str]) -> float:
    """Mean per-token next-token CE over held-out documents."""
    total, weight = 0.0, 0.0
    for doc in docs:
        ids = encode_doc(doc, backbone.config.context_len)
        loss = _doc_ce(backbone, ids)
        ntok = len(ids) - 1
        total += loss.item() * ntok
        weight += ntok
    return total / max(weight, 1.0)


def pretrain(
    corpus: list[str],
    config: BackboneConfig,
    train_cfg: PretrainConfig,
    seed: int = 0,
    warmup_corpus: list[str] | None = None,
    warmup_steps: int = 0,
) -> tuple[Backbone, PretrainReport]:
    """Next-token pretraining on the general corpus; returns the model and the
    final held-out loss.

    When a warmup corpus is given, the first warmup_steps draw batches from it
    before switching to the main corpus (a curriculum: simple structural tasks
    first, then the full mixture)."""
    if not corpus:
        raise BackboneError("pretrain: empty corpus")
    if warmup_steps > 0 and not warmup_corpus:
        raise BackboneError("pretrain: warmup_steps without a warmup corpus")
    t0 = time.monotonic()
    rng = nm.make_rng(seed)
    backbone = Backbone(config, rng)
    backbone.set_trainable(True)
    params = backbone.parameters()
    opt = AdamW(params, train_cfg.beta1, train_cfg.beta2, train_cfg.eps, train_cfg.weight_decay)

    n_heldout = max(1, int(len(corpus) * train_cfg.heldout_fraction))
    heldout = corpus[:n_heldout]
    train_docs = corpus[n_heldout:]
    if not train_docs:
        raise BackboneError("pretrain: corpus too small for a held-out split")

    loss_curve: list[float] = []
    first_loss = final_loss = 0.0
    for step in range(train_cfg.steps):
        pool = warmup_corpus if step < warmup_steps else train_docs
        idx = rng.integers(0, len(pool), size=train_cfg.batch_size)
        losses = []
        for i in idx:
            ids = encode_doc(pool[int(i)], config.context_len)
            losses.append(_doc_ce(backbone, ids))
        total = losses[0]
        for extra in losses[1:]:
            total = nm.add(total, extra)
        total = nm.scale(total, 1.0 / len(losses))
        nm.assert_finite(total, f"pretrain loss at step {step}")
        nm.backward(total)
        lr = cosine_lr(step + 1, train_cfg.steps, train_cfg.warmup_fraction, train_cfg.lr)
        opt.step(lr)
        opt.zero_grad()
        loss_val = total.item()
        if step == 0:
            first_loss = loss_val
        final_loss = loss_val
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            loss_curve.append(loss_val)

    backbone.set_trainable(False)
    heldout_ce = heldout_cross_entropy(backbone, heldout)
    report = PretrainReport(
        steps=train_cfg.steps,
        first_loss=first_loss,
        final_loss=final_loss,
        heldout_ce=heldout_ce,
        wall_time_s=time.monotonic() - t0,
        loss_curve=loss_curve,
    )
    return backbone, report


# -----------------------------------------------------------------------------
# Checkpointing
# -----------------------------------------------------------------------------


def save_backbone(backbone: Backbone, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(backbone.config.to_json(), f, indent=2, sort_keys=True)
    write_manifest_bin(out / "weights.bin", [(k, p.data) for k, p in backbone.parameters().items()])


def load_backbone(ckpt_dir) -> Backbone:
    ckpt = Path(ckpt_dir)
    with open(ckpt / "config.json") as f:
        config = BackboneConfig.from_json(json.load(f))
    weights = read_manifest_bin(ckpt / "weights.bin")
    backbone = Backbone(config, nm.make_rng(0))
    for name, p in backbone.parameters().items():
        if name not in weights:
            raise BackboneError(f"weights.bin missing tensor {name!r}")
        if weights[name].shape != p.data.shape:
            raise BackboneError(f"tensor {name!r} shape {weights[name].shape} != {p.data.shape}")
        p.data = weights[name].copy()
        p.requires_grad = False
    return backbone
