"""Tag registry: creation, norm-matched initialization, freezing, enrichment
forks, and persistence of domain and function tag embeddings.

Tags are appended to the model's input embedding space: tag number i (in
registration order) gets id V + i, disjoint from the base vocabulary, and is
never producible by the output projection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor

TAG_KINDS = ("domain", "function")
TAG_STATUSES = ("trainable", "frozen")


class TagError(ValueError):
    """Unknown tag, duplicate name, kind misuse, or a degenerate initialization."""


@dataclass
class TagInitReport:
    """How the average-embedding initialization was computed."""

    mean_embedding: np.ndarray  # v_hat, length d
    mean_norm: float  # average norm of the base token embeddings
    norm_of_mean: float  # ||v_hat||
    scale: float  # mean_norm / norm_of_mean


@dataclass
class TagSpec:
    name: str
    kind: str
    p: int
    embedding: Tensor  # p x d
    status: str = "trainable"
    tag_id: int = -1
    lineage: list[dict] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.embedding.data.shape[1]

    @property
    def param_count(self) -> int:
        return self.p * self.d


def compute_init_rows(base_embedding: np.ndarray, p: int) -> tuple[np.ndarray, TagInitReport]:
    """p identical rows of the rescaled mean base embedding.

    v_hat is the mean base-embedding row, scaled by (mean row norm)/||v_hat||
    so each tag row's norm matches the average base-embedding norm. Stats are
    accumulated in float64 regardless of the table dtype.
    """
    table = np.asarray(base_embedding, dtype=np.float64)
    v_hat = table.mean(axis=0)
    norm_of_mean = float(np.linalg.norm(v_hat))
    mean_norm = float(np.linalg.norm(table, axis=1).mean())
    if norm_of_mean == 0.0:
        raise TagError(
            "tag initialization undefined: mean base embedding is the zero vector, "
            "so the norm-matching scale does not exist"
        )
    scale = mean_norm / norm_of_mean
    rows = np.tile(scale * v_hat, (p, 1))
    report = TagInitReport(v_hat, mean_norm, norm_of_mean, scale)
    return rows, report


class TagTable:
    """Ordered registry of tags; id assignment is stable for the artifact's life."""

    def __init__(self, base_vocab_size: int, d: int):
        self.base_vocab_size = base_vocab_size
        self.d = d
        self._tags: dict[str, TagSpec] = {}

    def __len__(self) -> int:
        return len(self._tags)

    def __contains__(self, name: str) -> bool:
        return name in self._tags

    def names(self) -> list[str]:
        return list(self._tags)

    def get(self, name: str) -> TagSpec:
        if name not in self._tags:
            raise TagError(f"tag {name!r} not registered")
        return self._tags[name]

    def by_id(self, tag_id: int) -> TagSpec:
        idx = tag_id - self.base_vocab_size
        if not (0 <= idx < len(self._tags)):
            raise TagError(f"unknown tag id {tag_id}")
        return self._tags[list(self._tags)[idx]]

    def register(self, spec: TagSpec) -> TagSpec:
        if spec.name in self._tags:
            raise TagError(f"tag {spec.name!r} already registered")
        if spec.kind not in TAG_KINDS:
            raise TagError(f"tag kind {spec.kind!r} invalid")
        if spec.embedding.data.shape != (spec.p, self.d):
            raise TagError(
                f"tag {spec.name!r} embedding shape {spec.embedding.data.shape} != ({spec.p},{self.d})"
            )
        spec.tag_id = self.base_vocab_size + len(self._tags)
        self._tags[spec.name] = spec
        return spec

    def clone(self) -> "TagTable":
        other = TagTable(self.base_vocab_size, self.d)
        for name, spec in self._tags.items():
            copy = TagSpec(
                name=spec.name,
                kind=spec.kind,
                p=spec.p,
                embedding=Tensor(spec.embedding.data.copy()),
                status=spec.status,
                lineage=[dict(r) for r in spec.lineage],
            )
            copy.tag_id = spec.tag_id
            other._tags[name] = copy
        return other


def init_tag(backbone, name: str, kind: str, p: int, table: TagTable) -> tuple[TagSpec, TagInitReport]:
    """Create and register a tag initialized from the backbone's average embedding."""
    if p < 1:
        raise TagError("tag length p must be >= 1")
    rows, report = compute_init_rows(backbone.token_emb.data, p)
    emb = Tensor(rows.astype(backbone.token_emb.data.dtype), requires_grad=False)
    spec = TagSpec(name=name, kind=kind, p=p, embedding=emb, status="trainable")
    table.register(spec)
    return spec, report


def set_status(spec: TagSpec, status: str) -> TagSpec:
    """Flip trainable/frozen; gradient routing honors this at training time."""
    if status not in TAG_STATUSES:
        raise TagError(f"status {status!r} invalid")
    spec.status = status
    return spec


def enrich_fork(spec: TagSpec, task_name: str, table: TagTable, stage: int = 2) -> TagSpec:
    """Named child copy of a domain tag for enrichment; the parent is preserved."""
    if spec.kind != "domain":
        raise TagError(f"enrich_fork on {spec.kind} tag {spec.name!r}; only domain tags enrich")
    child = TagSpec(
        name=f"{spec.name}@{task_name}",
        kind="domain",
        p=spec.p,
        embedding=Tensor(spec.embedding.data.copy(), requires_grad=False),
        status="trainable",
        lineage=[dict(r) for r in spec.lineage]
        + [{"stage": stage, "task": task_name, "parent": spec.name}],
    )
    table.register(child)
    return child


# -----------------------------------------------------------------------------
# Persistence: tags.json (specs + lineage + offsets) and tags.bin (weights)
# -----------------------------------------------------------------------------


def write_manifest_bin(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Manifest-prefixed binary: u64-LE header length, JSON header listing
    name/shape/byte offset, then raw little-endian float32 payload in order."""
    entries = []
    payload = bytearray()
    for name, arr in tensors:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr32.tobytes())
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def read_manifest_bin(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return out


def save_tags(table: TagTable, json_path, bin_path) -> None:
    specs = []
    tensors = []
    for name in table.names():
        spec = table.get(name)
        specs.append(
            {
                "name": spec.name,
                "kind": spec.kind,
                "p": spec.p,
                "status": spec.status,
                "tag_id": spec.tag_id,
                "lineage": spec.lineage,
            }
        )
        tensors.append((spec.name, spec.embedding.data))
    doc = {"base_vocab_size": table.base_vocab_size, "d": table.d, "tags": specs}
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    write_manifest_bin(bin_path, tensors)


def load_tags(json_path, bin_path, expect_d: int | None = None) -> TagTable:
    with open(json_path) as f:
        doc = json.load(f)
    d = int(doc["d"])
    if expect_d is not None and d != expect_d:
        raise TagError(f"tag table d={d} does not match backbone d={expect_d}")
    weights = read_manifest_bin(bin_path)
    table = TagTable(int(doc["base_vocab_size"]), d)
    for entry in doc["tags"]:
        name = entry["name"]
        if name not in weights:
            raise TagError(f"tags.bin missing weights for {name!r}")
        arr = weights[name]
        if arr.shape != (entry["p"], d):
            raise TagError(f"tag {name!r} stored shape {arr.shape} != ({entry['p']},{d})")
        spec = TagSpec(
            name=name,
            kind=entry["kind"],
            p=int(entry["p"]),
            embedding=Tensor(arr),
            status=entry["status"],
            lineage=[dict(r) for r in entry["lineage"]],
        )
        expected_id = table.base_vocab_size + len(table)
        if int(entry["tag_id"]) != expected_id:
            raise TagError(f"tag {name!r} id {entry['tag_id']} breaks registration order")
        table.register(spec)
    return table
