"""Deterministic prompt assembly: template segments to mixed id sequences with
loss masks and the function-tag readout index.

The base tokenizer is character-level over a fixed vocabulary; 'standard' and
'per_character' are kept as distinct modes even though both map one character
to one id at this scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

BOS_ID = 0
EOS_ID = 1

_VOCAB_CHARS = (
    " \n"
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    ".,:;()<>[]+-=#/_%?!'\""
)

CHAR_TO_ID = {c: i + 2 for i, c in enumerate(_VOCAB_CHARS)}
ID_TO_CHAR = {i: c for c, i in CHAR_TO_ID.items()}
BASE_VOCAB_SIZE = 2 + len(_VOCAB_CHARS)

TOKENIZE_MODES = ("standard", "per_character")


class TemplateError(ValueError):
    """Malformed template or record missing a required field."""


class VocabularyError(ValueError):
    """Character outside the base vocabulary."""


def tokenize(text: str, mode: str = "standard") -> list[int]:
    """Map each character to its own id (both modes are character-level here)."""
    if mode not in TOKENIZE_MODES:
        raise TemplateError(f"unknown tokenization mode {mode!r}")
    try:
        return [CHAR_TO_ID[c] for c in text]
    except KeyError as e:
        raise VocabularyError(f"character {e.args[0]!r} not in vocabulary") from None


def detokenize(ids) -> str:
    """Inverse of tokenize for base-character ids; BOS/EOS and tag ids are skipped."""
    return "".join(ID_TO_CHAR[i] for i in ids if i in ID_TO_CHAR)


# -----------------------------------------------------------------------------
# Template segments
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """One template piece: literal | tag | payload | output.

    tag segments carry a fixed tag name or a record field holding one.
    output mode 'numeric' supplies a regression target; 'tokens' appends the
    (serialized) output text plus EOS for next-token training.
    """

    kind: str
    text: str = ""
    name: str = ""
    fld: str = ""
    tokenization: str = "per_character"
    mode: str = "numeric"
    precision: int = 2


def literal(text: str) -> Segment:
    return Segment(kind="literal", text=text)


def tag(name: str = "", fld: str = "") -> Segment:
    if bool(name) == bool(fld):
        raise TemplateError("tag segment needs exactly one of name= or fld=")
    return Segment(kind="tag", name=name, fld=fld)


def payload(fld: str, tokenization: str = "per_character") -> Segment:
    return Segment(kind="payload", fld=fld, tokenization=tokenization)


def output(fld: str, mode: str = "numeric", precision: int = 2) -> Segment:
    if mode not in ("numeric", "tokens"):
        raise TemplateError(f"output mode {mode!r} invalid")
    return Segment(kind="output", fld=fld, mode=mode, precision=precision)


@dataclass(frozen=True)
class Template:
    name: str
    segments: tuple[Segment, ...]
    lm_scope: tuple[str, ...] = ()  # payload fields contributing to the in-domain LM loss

    def __post_init__(self):
        outputs = [s for s in self.segments if s.kind == "output"]
        if len(outputs) > 1:
            raise TemplateError(f"{self.name}: more than one output segment")
        if outputs:
            out_pos = self.segments.index(outputs[0])
            tag_positions = [i for i, s in enumerate(self.segments) if s.kind == "tag"]
            if tag_positions and max(tag_positions) > out_pos:
                raise TemplateError(f"{self.name}: tags must precede the output segment")

    def tag_names(self) -> list[str]:
        return [s.name for s in self.segments if s.kind == "tag" and s.name]

    def to_json(self) -> dict:
        segs = []
        for s in self.segments:
            d = {"kind": s.kind}
            if s.kind == "literal":
                d["text"] = s.text
            elif s.kind == "tag":
                d["name"] = s.name
                d["field"] = s.fld
            elif s.kind == "payload":
                d["field"] = s.fld
                d["tokenization"] = s.tokenization
            else:
                d["field"] = s.fld
                d["mode"] = s.mode
                d["precision"] = s.precision
            segs.append(d)
        return {"name": self.name, "segments": segs, "lm_scope": list(self.lm_scope)}

    @staticmethod
    def from_json(obj: dict) -> "Template":
        segs = []
        for d in obj["segments"]:
            kind = d["kind"]
            if kind == "literal":
                segs.append(literal(d["text"]))
            elif kind == "tag":
                segs.append(tag(name=d.get("name", ""), fld=d.get("field", "")))
            elif kind == "payload":
                segs.append(payload(d["field"], d.get("tokenization", "per_character")))
            elif kind == "output":
                segs.append(output(d["field"], d.get("mode", "numeric"), d.get("precision", 2)))
            else:
                raise TemplateError(f"unknown segment kind {kind!r}")
        return Template(obj["name"], tuple(segs), tuple(obj.get("lm_scope", ())))


def load_template(path) -> Template:
    with open(path) as f:
        return Template.from_json(json.load(f))


def save_template(template: Template, path) -> None:
    with open(path, "w") as f:
        json.dump(template.to_json(), f, indent=2, sort_keys=True)


# -----------------------------------------------------------------------------
# Rendering
# -----------------------------------------------------------------------------


@dataclass
class RenderedExample:
    """Mixed token/tag id sequence plus masks and the readout position.

    lm_mask[i] weighs the prediction of ids[i+1] (in-scope payload tokens);
    target_mask[i] likewise for output tokens. prompt_len is the id count
    before any output tokens. readout_index is the final function-tag
    position (last prompt position when the template carries no function tag).
    """

    ids: np.ndarray
    lm_mask: np.ndarray
    target_mask: np.ndarray
    target_value: np.ndarray | None
    readout_index: int
    prompt_len: int
    meta: dict = field(default_factory=dict)


def render(
    template: Template,
    record: dict,
    tag_table,
    tag_alias: dict[str, str] | None = None,
    max_len: int | None = None,
) -> RenderedExample:
    """Assemble segments in order. Tag placeholders expand to p copies of the
    tag's id; payloads tokenize per their mode; numeric outputs become the
    regression target; token outputs append serialized text plus EOS."""
    alias = tag_alias or {}
    ids: list[int] = [BOS_ID]
    origins: list[tuple] = [("struct",)]
    readout_index = -1
    prompt_len = -1
    target_value = None
    fn_tag_seen = ""

    for seg in template.segments:
        if seg.kind == "literal":
            toks = tokenize(seg.text)
            ids.extend(toks)
            origins.extend([("struct",)] * len(toks))
        elif seg.kind == "tag":
            name = seg.name
            if not name:
                if seg.fld not in record:
                    raise TemplateError(f"record missing tag field {seg.fld!r}")
                name = str(record[seg.fld])
            name = alias.get(name, name)
            spec = tag_table.get(name)
            ids.extend([spec.tag_id] * spec.p)
            origins.extend([("tag", name)] * spec.p)
            if spec.kind == "function":
                readout_index = len(ids) - 1
                fn_tag_seen = name
        elif seg.kind == "payload":
            if seg.fld not in record:
                raise TemplateError(f"record missing payload field {seg.fld!r}")
            toks = tokenize(str(record[seg.fld]), seg.tokenization)
            ids.extend(toks)
            origins.extend([("payload", seg.fld)] * len(toks))
        else:  # output
            if seg.fld not in record:
                raise TemplateError(f"record missing output field {seg.fld!r}")
            value = record[seg.fld]
            if seg.mode == "numeric":
                target_value = np.asarray([float(value)], dtype=np.float64)
                prompt_len = len(ids)
            else:
                text = value if isinstance(value, str) else f"{float(value):.{seg.precision}f}"
                prompt_len = len(ids)
                toks = tokenize(text) + [EOS_ID]
                ids.extend(toks)
                origins.extend([("output",)] * len(toks))

    if prompt_len < 0:
        prompt_len = len(ids)
    if readout_index < 0:
        readout_index = prompt_len - 1
    if max_len is not None and len(ids) > max_len:
        raise TemplateError(f"rendered length {len(ids)} exceeds max_len {max_len}")

    n = len(ids)
    lm_mask = np.zeros(n, dtype=np.float32)
    target_mask = np.zeros(n, dtype=np.float32)
    for i in range(n - 1):
        nxt = origins[i + 1]
        if nxt[0] == "payload" and nxt[1] in template.lm_scope:
            lm_mask[i] = 1.0
        elif nxt[0] == "output":
            target_mask[i] = 1.0

    return RenderedExample(
        ids=np.asarray(ids, dtype=np.int64),
        lm_mask=lm_mask,
        target_mask=target_mask,
        target_value=target_value,
        readout_index=readout_index,
        prompt_len=prompt_len,
        meta={"template": template.name, "function_tag": fn_tag_seen},
    )


# -----------------------------------------------------------------------------
# Builtin templates and surgery
# -----------------------------------------------------------------------------


def stage1_template(tag_name: str) -> Template:
    """Domain tag immediately before raw in-domain text, behind the same
    "In: " scaffolding the downstream prompts use, so the tag trains in the
    slot position it will later occupy."""
    return Template(
        name=f"stage1_{tag_name}",
        segments=(literal("In: "), tag(tag_name), payload("text")),
        lm_scope=("text",),
    )


def builtin_templates() -> dict[str, Template]:
    """The four task shapes, instantiated for the reference synthetic tasks:
    translate, scalar property (descriptor, qed), pair combination, and
    cross-domain affinity."""
    return {
        "translate": Template(
            "translate",
            (
                literal("In: "),
                tag(fld="src_lang"),
                payload("src"),
                literal("\nOut: "),
                tag(fld="tgt_lang"),
                tag("translate"),
                output("tgt", mode="tokens"),
            ),
            lm_scope=("src",),
        ),
        "descriptor": Template(
            "descriptor",
            (
                literal("In: protein "),
                tag("prot"),
                payload("seq"),
                literal("\nOut: descriptor "),
                tag("descriptor"),
                output("label", mode="numeric", precision=2),
            ),
            lm_scope=("seq",),
        ),
        "qed": Template(
            "qed",
            (
                literal("In: molecule "),
                tag("mol"),
                payload("seq"),
                literal("\nOut: qed "),
                tag("qed"),
                output("label", mode="numeric", precision=2),
            ),
            lm_scope=("seq",),
        ),
        "pair_combination": Template(
            "pair_combination",
            (
                literal("In: drug 1 "),
                tag("mol"),
                payload("mol1"),
                literal(". drug 2 "),
                tag("mol"),
                payload("mol2"),
                literal("\nOut: combo "),
                tag("combo"),
                output("label", mode="numeric", precision=1),
            ),
            lm_scope=("mol1", "mol2"),
        ),
        "cross_affinity": Template(
            "cross_affinity",
            (
                literal("In: protein "),
                tag("prot"),
                payload("prot"),
                literal(". molecule "),
                tag("mol"),
                payload("mol"),
                literal("\nOut: affinity "),
                tag("affinity"),
                output("label", mode="numeric", precision=2),
            ),
            lm_scope=("prot", "mol"),
        ),
    }


def remove_tags(template: Template, names: set[str]) -> Template:
    """Template surgery: drop tag segments whose (fixed) name is in names."""
    segs = tuple(s for s in template.segments if not (s.kind == "tag" and s.name in names))
    return Template(template.name + "_surgery", segs, template.lm_scope)


def replace_tags_with_text(template: Template, names: set[str]) -> Template:
    """Replace tag segments with literal text naming the tag (text-form domain info)."""
    segs = []
    for s in template.segments:
        if s.kind == "tag" and s.name in names:
            segs.append(literal(f"<{s.name}>"))
        else:
            segs.append(s)
    return Template(template.name + "_text_domain", tuple(segs), template.lm_scope)


def prepend_prompt_tag(template: Template, prompt_tag: str, drop_tags: bool = True) -> Template:
    """Prompt-tuning surgery: a single soft prompt at the very front; other
    tag segments optionally removed."""
    segs = [tag(prompt_tag)]
    for s in template.segments:
        if drop_tags and s.kind == "tag":
            continue
        segs.append(s)
    return Template(template.name + "_prompt_tuning", tuple(segs), template.lm_scope)


def with_output_mode(template: Template, mode: str, precision: int | None = None) -> Template:
    """Switch the output segment between numeric readout and digit generation."""
    segs = []
    for s in template.segments:
        if s.kind == "output":
            segs.append(output(s.fld, mode=mode, precision=precision if precision is not None else s.precision))
        else:
            segs.append(s)
    return Template(template.name + f"_{mode}", tuple(segs), template.lm_scope)


def with_function_tag(template: Template, old: str, new: str) -> Template:
    """Rename a fixed tag reference (used by the tag-length sweep)."""
    segs = tuple(tag(new) if (s.kind == "tag" and s.name == old) else s for s in template.segments)
    return Template(template.name, segs, template.lm_scope)
