"""Task-specific output heads paired with function tags, greedy decoding over
the base vocabulary, and the digit-generation codec used by the
no-regression-head ablation.

The numeric path reads the hidden state at the function tag's final position
and never touches the output projection; the generation path reuses the
backbone's projection and never touches the head weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .templates import EOS_ID, detokenize

HEAD_KINDS = ("regression", "classification", "generation")


class HeadError(ValueError):
    """Head misuse: wrong kind for an operation or invalid readout index."""


@dataclass
class TaskHead:
    name: str
    kind: str
    d_t: int
    weight: Tensor | None  # d x d_t; absent for generation heads
    loss: str = "mse"
    target_mean: float = 0.0
    target_std: float = 1.0

    @property
    def param_count(self) -> int:
        return 0 if self.weight is None else int(self.weight.data.size)


def make_head(name: str, kind: str, d: int, d_t: int = 1, loss: str = "mse") -> TaskHead:
    """Zero-initialized weight, so the initial prediction is 0 (the mean of
    standardized targets). Generation heads carry no weight."""
    if kind not in HEAD_KINDS:
        raise HeadError(f"head kind {kind!r} invalid")
    if kind == "generation":
        return TaskHead(name, kind, d_t=0, weight=None, loss="cross_entropy")
    weight = Tensor(np.zeros((d, d_t), dtype=np.float32), requires_grad=False)
    return TaskHead(name, kind, d_t=d_t, weight=weight, loss=loss)


def fit_standardizer(head: TaskHead, labels) -> None:
    """Per-task target standardization; constants persist with the head."""
    arr = np.asarray(labels, dtype=np.float64)
    head.target_mean = float(arr.mean())
    head.target_std = float(max(arr.std(), 1e-6))


def standardize(head: TaskHead, y: float) -> float:
    return (y - head.target_mean) / head.target_std


def destandardize(head: TaskHead, y: float) -> float:
    return y * head.target_std + head.target_mean


def predict_numeric(hidden: Tensor, readout_index: int, head: TaskHead) -> Tensor:
    """w_t^T applied to the hidden state at the readout position -> (1, d_t)."""
    if head.kind == "generation":
        raise HeadError("predict_numeric on a generation head")
    n = hidden.data.shape[0]
    if not (0 <= readout_index < n):
        raise HeadError(f"readout index {readout_index} outside [0,{n})")
    h_row = nm.gather_rows(hidden, [readout_index])
    return nm.matmul(h_row, head.weight)


def classify_probs(head: TaskHead, hidden: Tensor, readout_index: int) -> np.ndarray:
    """Normalized class probabilities from a classification head."""
    if head.kind != "classification":
        raise HeadError("classify_probs on a non-classification head")
    logits = predict_numeric(hidden, readout_index, head)
    return nm.softmax(logits, axis=-1).data[0]


def greedy_decode(backbone, tag_table, prompt_ids, max_len: int, stop_id: int = EOS_ID) -> list[int]:
    """Argmax next-token loop over the base vocabulary only; stops at stop_id
    or after max_len emitted tokens. Returns the emitted ids (stop_id excluded)."""
    ids = list(int(i) for i in prompt_ids)
    out: list[int] = []
    for _ in range(max_len):
        if len(ids) >= backbone.config.context_len:
            break
        x = backbone.embed(np.asarray(ids, dtype=np.int64), tag_table)
        logits, _ = backbone.forward(x)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == stop_id:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


# -----------------------------------------------------------------------------
# Digit generation codec
# -----------------------------------------------------------------------------


def serialize_value(value: float, precision: int) -> str:
    """Fixed-precision decimal string: sign, integer part, '.', `precision` digits."""
    return f"{value:.{precision}f}"


def parse_value(text: str) -> float | None:
    """Inverse of serialize_value; None when the string is not a decimal."""
    try:
        return float(text)
    except (TypeError, ValueError):
        return None


def digit_generation_roundtrip(value: float, precision: int) -> tuple[str, float]:
    """Serialize then parse; exact at the given precision."""
    text = serialize_value(value, precision)
    parsed = parse_value(text)
    assert parsed is not None
    return text, parsed


def decode_numeric(
    backbone,
    tag_table,
    prompt_ids,
    precision: int,
    max_len: int = 12,
    failure_value: float = 0.0,
) -> tuple[float, bool]:
    """Digit-generation inference: greedy-decode a decimal string and parse it.

    Unparseable outputs map to failure_value (callers pass the train-set
    mean) and are flagged so failure rates can be reported."""
    ids = greedy_decode(backbone, tag_table, prompt_ids, max_len=max_len)
    text = detokenize(ids)
    parsed = parse_value(text)
    if parsed is None:
        return failure_value, True
    return parsed, False


# -----------------------------------------------------------------------------
# Persistence: heads.json + heads.bin
# -----------------------------------------------------------------------------


def save_heads(heads: dict[str, TaskHead], json_path, bin_path) -> None:
    import json

    from .tags import write_manifest_bin

    entries = []
    tensors = []
    for name in sorted(heads):
        h = heads[name]
        entries.append(
            {
                "name": h.name,
                "kind": h.kind,
                "d_t": h.d_t,
                "loss": h.loss,
                "target_mean": h.target_mean,
                "target_std": h.target_std,
                "has_weight": h.weight is not None,
            }
        )
        if h.weight is not None:
            tensors.append((h.name, h.weight.data))
    with open(json_path, "w") as f:
        json.dump({"heads": entries}, f, indent=2, sort_keys=True)
    write_manifest_bin(bin_path, tensors)


def load_heads(json_path, bin_path) -> dict[str, TaskHead]:
    import json

    from .tags import read_manifest_bin

    with open(json_path) as f:
        doc = json.load(f)
    weights = read_manifest_bin(bin_path)
    heads = {}
    for e in doc["heads"]:
        weight = None
        if e["has_weight"]:
            weight = Tensor(weights[e["name"]].copy())
        heads[e["name"]] = TaskHead(
            name=e["name"],
            kind=e["kind"],
            d_t=int(e["d_t"]),
            weight=weight,
            loss=e["loss"],
            target_mean=float(e["target_mean"]),
            target_std=float(e["target_std"]),
        )
    return heads
