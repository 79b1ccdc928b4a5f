"""Synthetic specialized domains with exact label oracles.

Three domain families stand in for real specialized data: cipher languages
(permutations of a shared 8-symbol alphabet), a 20-letter toy-protein
alphabet, and a 12-symbol toy-molecule alphabet with brackets. Every label
is recomputable from the raw string(s), so downstream numbers can be
checked by brute force.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

CIPHER_BASE_ALPHABET = "abcdefgh"
PROTEIN_ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
MOLECULE_LETTERS = "mnopqrstuv"
MOLECULE_ALPHABET = MOLECULE_LETTERS + "()"


class DomainError(ValueError):
    """Malformed domain spec or out-of-alphabet input."""


@dataclass(frozen=True)
class DomainSpec:
    """First-order Markov generator over an ordered alphabet."""

    name: str
    alphabet: str
    init_probs: np.ndarray
    transitions: np.ndarray  # row c: distribution of the next char given c
    min_len: int
    max_len: int

    def validate(self) -> None:
        k = len(self.alphabet)
        if self.init_probs.shape != (k,) or self.transitions.shape != (k, k):
            raise DomainError(f"{self.name}: distribution shapes do not match alphabet size {k}")
        if abs(self.init_probs.sum() - 1.0) > 1e-9:
            raise DomainError(f"{self.name}: initial distribution does not sum to 1")
        rowsums = self.transitions.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-9:
            raise DomainError(f"{self.name}: transition rows do not sum to 1")
        if not (1 <= self.min_len <= self.max_len):
            raise DomainError(f"{self.name}: bad length bounds [{self.min_len},{self.max_len}]")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "alphabet": self.alphabet,
            "init_probs": self.init_probs.tolist(),
            "transitions": self.transitions.tolist(),
            "min_len": self.min_len,
            "max_len": self.max_len,
        }

    @staticmethod
    def from_json(obj: dict) -> "DomainSpec":
        spec = DomainSpec(
            name=obj["name"],
            alphabet=obj["alphabet"],
            init_probs=np.asarray(obj["init_probs"], dtype=np.float64),
            transitions=np.asarray(obj["transitions"], dtype=np.float64),
            min_len=int(obj["min_len"]),
            max_len=int(obj["max_len"]),
        )
        spec.validate()
        return spec


def sample_string(spec: DomainSpec, rng: np.random.Generator) -> str:
    """One Markov sample with uniform length in [min_len, max_len]."""
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    k = len(spec.alphabet)
    out = []
    c = int(rng.choice(k, p=spec.init_probs))
    out.append(spec.alphabet[c])
    for _ in range(n - 1):
        c = int(rng.choice(k, p=spec.transitions[c]))
        out.append(spec.alphabet[c])
    return "".join(out)


def gen_corpus(spec: DomainSpec, count: int, seed: int) -> list[str]:
    """count i.i.d. samples, deterministic per seed."""
    if count < 1:
        raise DomainError("gen_corpus: count must be >= 1")
    spec.validate()
    rng = np.random.default_rng(np.uint64(seed))
    return [sample_string(spec, rng) for _ in range(count)]


# -----------------------------------------------------------------------------
# Cipher languages
# -----------------------------------------------------------------------------


_ANCHOR_P = 0.40
_SUCCESSOR_P = 0.45


def _base_cipher_chain() -> tuple[np.ndarray, np.ndarray]:
    """Anchored chain over the base alphabet: a pull back to char 0 plus a
    strong successor bias, so each permuted language has a distinctive
    unigram profile without drowning the text in one repeated character."""
    k = len(CIPHER_BASE_ALPHABET)
    rest = 1.0 - _ANCHOR_P - _SUCCESSOR_P
    init = np.full(k, 0.4 / (k - 1))
    init[0] = 0.6
    trans = np.zeros((k, k))
    for c in range(k):
        row = np.full(k, rest / (k - 2))
        row[0] = _ANCHOR_P
        row[(c + 1) % k] = _SUCCESSOR_P
        if (c + 1) % k == 0:
            # successor collides with the anchor; merge the mass
            row = np.full(k, rest / (k - 1))
            row[0] = _ANCHOR_P + _SUCCESSOR_P
        trans[c] = row / row.sum()
    return init, trans


def apply_permutation(perm: str, text: str) -> str:
    """Map base-alphabet text through perm (perm[i] is the image of base char i)."""
    table = {CIPHER_BASE_ALPHABET[i]: perm[i] for i in range(len(perm))}
    try:
        return "".join(table[c] for c in text)
    except KeyError as e:
        raise DomainError(f"character {e.args[0]!r} outside cipher alphabet") from None


def invert_permutation(perm: str) -> str:
    inv = [""] * len(perm)
    for i, ch in enumerate(perm):
        inv[CIPHER_BASE_ALPHABET.index(ch)] = CIPHER_BASE_ALPHABET[i]
    return "".join(inv)


def rotation_permutation(r: int) -> str:
    k = len(CIPHER_BASE_ALPHABET)
    return "".join(CIPHER_BASE_ALPHABET[(i + r) % k] for i in range(k))


def cipher_language_spec(name: str, perm: str, min_len: int = 12, max_len: int = 32) -> DomainSpec:
    """Language defined by a permutation of the base alphabet.

    The chain matrices stay in base-index space; the permutation is the
    spec's alphabet ordering, so sampled strings equal perm(base strings)
    draw for draw.
    """
    if sorted(perm) != sorted(CIPHER_BASE_ALPHABET):
        raise DomainError(f"perm {perm!r} is not a permutation of {CIPHER_BASE_ALPHABET!r}")
    init, trans = _base_cipher_chain()
    spec = DomainSpec(name, perm, init, trans, min_len, max_len)
    spec.validate()
    return spec


def cipher_translate_oracle(text: str, src_perm: str, tgt_perm: str) -> str:
    """Per-character sigma_tgt(sigma_src^-1(x))."""
    base = apply_permutation(invert_permutation(src_perm), text)
    return apply_permutation(tgt_perm, base)


# -----------------------------------------------------------------------------
# Toy protein / molecule domains and their oracles
# -----------------------------------------------------------------------------


def protein_spec(min_len: int = 8, max_len: int = 24) -> DomainSpec:
    """Random-walk chain over the 20-letter alphabet: next index near current."""
    k = len(PROTEIN_ALPHABET)
    idx = np.arange(k)
    trans = np.exp(-np.abs(idx[:, None] - idx[None, :]) / 2.0)
    trans /= trans.sum(axis=1, keepdims=True)
    init = np.full(k, 1.0 / k)
    spec = DomainSpec("prot", PROTEIN_ALPHABET, init, trans, min_len, max_len)
    spec.validate()
    return spec


def molecule_spec(min_len: int = 8, max_len: int = 28) -> DomainSpec:
    """Letters favor their cyclic successor; brackets appear at fixed rates."""
    k = len(MOLECULE_ALPHABET)
    nl = len(MOLECULE_LETTERS)
    trans = np.zeros((k, k))
    for c in range(k):
        row = np.full(k, 0.14 / (k - 2))
        row[nl] = 0.10  # '('
        row[nl + 1] = 0.08  # ')'
        if c < nl:
            row[(c + 1) % nl] += 0.55
        else:
            row[:nl] += 0.55 / nl
        trans[c] = row / row.sum()
    init = np.zeros(k)
    init[:nl] = 1.0 / nl
    spec = DomainSpec("mol", MOLECULE_ALPHABET, init, trans, min_len, max_len)
    spec.validate()
    return spec


def descriptor_oracle(s: str) -> float:
    """Mean character weight plus half the mean adjacent-pair product.

    w(c) = 2*idx(c)/(K-1) - 1 over the toy-protein alphabet; the pair term is
    zero for single-character strings.
    """
    if len(s) < 1:
        raise DomainError("descriptor_oracle: empty string")
    k = len(PROTEIN_ALPHABET)
    try:
        w = [2.0 * PROTEIN_ALPHABET.index(c) / (k - 1) - 1.0 for c in s]
    except ValueError:
        raise DomainError(f"descriptor_oracle: character outside alphabet in {s!r}") from None
    mean_w = sum(w) / len(w)
    if len(w) == 1:
        return mean_w
    pair = sum(a * b for a, b in zip(w, w[1:])) / (len(w) - 1)
    return mean_w + 0.5 * pair


def qed_oracle(s: str) -> float:
    """((1+b)/(2+o)) * exp(-|n-16|/16) with b matched bracket pairs, o '(' count."""
    if len(s) < 1:
        raise DomainError("qed_oracle: empty string")
    depth = 0
    matched = 0
    for c in s:
        if c == "(":
            depth += 1
        elif c == ")" and depth > 0:
            depth -= 1
            matched += 1
    opens = s.count("(")
    n = len(s)
    return ((1.0 + matched) / (2.0 + opens)) * math.exp(-abs(n - 16) / 16.0)


def combination_oracle(s1: str, s2: str) -> float:
    """50*(q1+q2) - 40*|q1-q2| over the molecule QED scores."""
    q1, q2 = qed_oracle(s1), qed_oracle(s2)
    return 50.0 * (q1 + q2) - 40.0 * abs(q1 - q2)


def affinity_oracle(prot: str, mol: str) -> float:
    """5 * (descriptor(prot) + 1) * qed(mol); nonnegative by construction."""
    return 5.0 * (descriptor_oracle(prot) + 1.0) * qed_oracle(mol)


# -----------------------------------------------------------------------------
# Labeled task datasets
# -----------------------------------------------------------------------------

TASK_SHAPES = (
    "single_domain_single_instance",
    "single_domain_multi_instance",
    "multi_domain_multi_instance",
    "translation",
)


@dataclass(frozen=True)
class LabeledTask:
    name: str
    shape: str
    domains: tuple[str, ...]
    template_name: str
    oracle_id: str
    d_t: int = 1
    metric: str = "mse"


DESCRIPTOR_TASK = LabeledTask("descriptor", "single_domain_single_instance", ("prot",), "descriptor", "descriptor", metric="mse")
QED_TASK = LabeledTask("qed", "single_domain_single_instance", ("mol",), "qed", "qed", metric="mse")
COMBINATION_TASK = LabeledTask("combo", "single_domain_multi_instance", ("mol",), "pair_combination", "combination", metric="mae")
AFFINITY_TASK = LabeledTask("affinity", "multi_domain_multi_instance", ("prot", "mol"), "cross_affinity", "affinity", metric="pearson")
TRANSLATE_TASK = LabeledTask("translate", "translation", ("cipher",), "translate", "cipher_translate", metric="token_accuracy")


def _sample_unique(spec: DomainSpec, count: int, rng: np.random.Generator, seen: set) -> list[str]:
    out = []
    attempts = 0
    while len(out) < count:
        s = sample_string(spec, rng)
        attempts += 1
        if s not in seen:
            seen.add(s)
            out.append(s)
        if attempts > 100 * count + 1000:
            raise DomainError(f"could not draw {count} unique strings from {spec.name}")
    return out


def build_task_datasets(
    task: LabeledTask,
    sizes: dict[str, int],
    seed: int,
    shift: bool = False,
) -> dict[str, list[dict]]:
    """Train/val/test splits with oracle labels; splits are disjoint by
    construction (payload tuples deduplicated across all splits).

    For the affinity task, shift=True adds a 'test_shifted' split whose
    string lengths are drawn from an upward-shifted range.
    """
    for name, n in sizes.items():
        if n < 1:
            raise DomainError(f"split {name}: size must be positive")
    rng = np.random.default_rng(np.uint64(seed))
    seen: set = set()
    splits: dict[str, list[dict]] = {}

    def records_for(count: int, specs: list[DomainSpec], fields: list[str], oracle) -> list[dict]:
        recs = []
        for _ in range(count):
            while True:
                vals = [sample_string(sp, rng) for sp in specs]
                key = tuple(vals)
                if key not in seen:
                    seen.add(key)
                    break
            rec = dict(zip(fields, vals))
            rec["label"] = oracle(*vals)
            recs.append(rec)
        return recs

    if task.oracle_id == "descriptor":
        spec = protein_spec()
        for split, n in sizes.items():
            splits[split] = records_for(n, [spec], ["seq"], descriptor_oracle)
    elif task.oracle_id == "qed":
        spec = molecule_spec()
        for split, n in sizes.items():
            splits[split] = records_for(n, [spec], ["seq"], qed_oracle)
    elif task.oracle_id == "combination":
        # shorter molecules keep two payloads plus a long function tag inside n_max
        spec = molecule_spec(8, 20)
        for split, n in sizes.items():
            splits[split] = records_for(n, [spec, spec], ["mol1", "mol2"], combination_oracle)
    elif task.oracle_id == "affinity":
        pspec, mspec = protein_spec(), molecule_spec()
        for split, n in sizes.items():
            splits[split] = records_for(n, [pspec, mspec], ["prot", "mol"], affinity_oracle)
        if shift:
            up_p = replace(pspec, min_len=pspec.max_len - 4, max_len=pspec.max_len + 4)
            up_m = replace(mspec, min_len=mspec.max_len - 4, max_len=mspec.max_len + 4)
            n = sizes.get("test", next(iter(sizes.values())))
            splits["test_shifted"] = records_for(n, [up_p, up_m], ["prot", "mol"], affinity_oracle)
    else:
        raise DomainError(f"build_task_datasets: unknown oracle {task.oracle_id!r}")
    return splits


def build_translation_dataset(
    src_spec: DomainSpec,
    src_perm: str,
    tgt_perm: str,
    src_lang: str,
    tgt_lang: str,
    count: int,
    seed: int,
) -> list[dict]:
    """Parallel records for one directed language pair."""
    rng = np.random.default_rng(np.uint64(seed))
    seen: set = set()
    texts = _sample_unique(src_spec, count, rng, seen)
    return [
        {
            "src": s,
            "tgt": cipher_translate_oracle(s, src_perm, tgt_perm),
            "src_lang": src_lang,
            "tgt_lang": tgt_lang,
        }
        for s in texts
    ]


# -----------------------------------------------------------------------------
# General pretraining corpus (stands in for a generic pretrained LM's data)
# -----------------------------------------------------------------------------


def _random_cipher_doc(rng: np.random.Generator) -> str:
    perm = "".join(rng.permutation(list(CIPHER_BASE_ALPHABET)))
    spec = cipher_language_spec("tmp", perm, min_len=24, max_len=48)
    return sample_string(spec, rng)


TRANSLATE_SRC_LEN = 10  # fixed source length: copying stays positionally aligned
_MARKER_LEN = 10  # matches the default tag length, so tags later sit in these slots
_IDENTITY_PAIR_FRAC = 0.2  # pure-copy curriculum share among translation scaffolds


def _translate_scaffold(rng: np.random.Generator) -> str:
    """Translation doc shaped like the tagged prompt: marker slots where the
    language tags will sit (each filled with the language's dominant char), a
    function-slot filler, and a fixed-length source."""
    p1 = "".join(rng.permutation(list(CIPHER_BASE_ALPHABET)))
    if rng.uniform() < _IDENTITY_PAIR_FRAC:
        p2 = p1
    else:
        p2 = "".join(rng.permutation(list(CIPHER_BASE_ALPHABET)))
    spec = cipher_language_spec("tmp", p1, min_len=TRANSLATE_SRC_LEN, max_len=TRANSLATE_SRC_LEN)
    s = sample_string(spec, rng)
    t = cipher_translate_oracle(s, p1, p2)
    m1 = p1[0] * _MARKER_LEN
    m2 = p2[0] * _MARKER_LEN
    return f"In: {m1}{s}\nOut: {m2}{'=' * _MARKER_LEN}{t}"


def _uniform_string(alphabet: str, rng: np.random.Generator, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[int(rng.integers(0, len(alphabet)))] for _ in range(n))


def _property_scaffold(rng: np.random.Generator) -> str:
    kind = int(rng.integers(0, 4))
    if kind == 0:
        payload = _uniform_string(PROTEIN_ALPHABET, rng, 8, 20)
        value = rng.uniform(-1.0, 1.0)
        return f"In: protein {payload}\nOut: descriptor {value:.2f}"
    if kind == 1:
        payload = _uniform_string(MOLECULE_ALPHABET, rng, 8, 20)
        value = rng.uniform(0.0, 1.0)
        return f"In: molecule {payload}\nOut: qed {value:.2f}"
    if kind == 2:
        a = _uniform_string(MOLECULE_ALPHABET, rng, 8, 16)
        b = _uniform_string(MOLECULE_ALPHABET, rng, 8, 16)
        value = rng.uniform(0.0, 100.0)
        return f"In: drug 1 {a}. drug 2 {b}\nOut: combo {value:.1f}"
    payload = _uniform_string(PROTEIN_ALPHABET, rng, 8, 16)
    m = _uniform_string(MOLECULE_ALPHABET, rng, 8, 16)
    value = rng.uniform(0.0, 12.0)
    return f"In: protein {payload}. molecule {m}\nOut: affinity {value:.2f}"


def _number_doc(rng: np.random.Generator) -> str:
    vals = [f"{rng.uniform(-100, 100):.2f}" for _ in range(int(rng.integers(2, 5)))]
    return " ".join(vals)


def gen_general_corpus(count: int, seed: int, max_chars: int = 150) -> list[str]:
    """Mixture corpus for backbone pretraining: filler prose, cipher text from
    random permutations, translation scaffolds, property scaffolds, numbers."""
    if count < 1:
        raise DomainError("gen_general_corpus: count must be >= 1")
    rng = np.random.default_rng(np.uint64(seed))
    makers = [
        (_translate_scaffold, 0.40),
        (_random_cipher_doc, 0.15),
        (_property_scaffold, 0.30),
        (_number_doc, 0.15),
    ]
    probs = np.array([w for _, w in makers])
    probs /= probs.sum()
    docs = []
    for _ in range(count):
        maker = makers[int(rng.choice(len(makers), p=probs))][0]
        docs.append(maker(rng)[:max_chars])
    return docs


# -----------------------------------------------------------------------------
# JSONL persistence
# -----------------------------------------------------------------------------


def save_jsonl(records: list[dict], path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
