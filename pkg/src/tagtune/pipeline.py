"""Reference end-to-end pipeline: data generation, backbone pretraining, the
three training stages, and the evaluation sweep, with every artifact written
under one directory and every metric collected into a single report.

All sizes and step budgets live in ReferenceBudgets so tests and the CLI
share one tunable source of truth. Everything is deterministic per seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import domains as dm
from .backbone import (
    Backbone,
    BackboneConfig,
    PretrainConfig,
    param_hash,
    pretrain,
    save_backbone,
)
from .evalsuite import (
    baseline_nearest_neighbor,
    domain_perplexity,
    evaluate_task,
    metric_pearson,
    regression_predictions,
    zero_shot_composition_eval,
)
from .heads import TaskHead, make_head, save_heads
from .protocol import StagePlan, TaskData, TrainReport, train_stage1, train_stage2, train_stage3
from .tags import TagTable, init_tag, save_tags
from .templates import builtin_templates

LANGUAGE_NAMES = tuple(f"lang{i}" for i in range(8))
# chain layout: targets cover the six seen languages uniformly, so the shared
# function tag cannot satisfy training by decoding toward one hub language
TRAIN_PAIRS = ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5))  # both directions each
HELDOUT_PAIR = (6, 7)


class PipelineError(RuntimeError):
    """Missing prerequisite artifact; the message names it."""


@dataclass(frozen=True)
class ReferenceBudgets:
    """Step budgets and dataset sizes for the desk-scale reference run."""

    general_docs: int = 4000
    general_max_chars: int = 120
    pretrain_steps: int = 2500
    pretrain_batch: int = 16
    pretrain_lr: float = 2e-3

    domain_docs: int = 300
    domain_heldout: int = 40
    stage1_steps: int = 240
    stage1_batch: int = 4
    stage1_accum: int = 4
    stage1_lr: float = 0.02

    task_train: int = 256
    task_test: int = 64
    stage2_steps: int = 400
    stage2_lr: float = 0.01

    translate_per_direction: int = 160
    translate_steps: int = 500
    translate_lr: float = 0.02
    translate_test: int = 64

    affinity_train: int = 288
    affinity_steps: int = 400
    affinity_lr: float = 0.01

    tag_p: int = 10


REFERENCE_BUDGETS = ReferenceBudgets()


def reference_backbone_config() -> BackboneConfig:
    return BackboneConfig(
        vocab_size=96, embed_dim=64, n_layers=2, n_heads=2, context_len=160, ff_mult=4
    )


# -----------------------------------------------------------------------------
# Data
# -----------------------------------------------------------------------------


def language_permutations() -> dict[str, str]:
    """Eight cipher languages realized as the eight rotations."""
    return {name: dm.rotation_permutation(i) for i, name in enumerate(LANGUAGE_NAMES)}


def build_reference_data(seed: int, budgets: ReferenceBudgets = REFERENCE_BUDGETS) -> dict:
    """All corpora and labeled datasets for one pipeline run."""
    perms = language_permutations()
    data: dict = {"seed": seed}
    data["general"] = dm.gen_general_corpus(
        budgets.general_docs, seed=seed, max_chars=budgets.general_max_chars
    )

    corpora: dict[str, dict] = {}
    for i, name in enumerate(LANGUAGE_NAMES):
        spec = dm.cipher_language_spec(name, perms[name])
        docs = dm.gen_corpus(spec, budgets.domain_docs + budgets.domain_heldout, seed=seed * 1000 + i)
        corpora[name] = {"train": docs[: budgets.domain_docs], "heldout": docs[budgets.domain_docs :]}
    for name, spec in (("prot", dm.protein_spec()), ("mol", dm.molecule_spec())):
        docs = dm.gen_corpus(spec, budgets.domain_docs + budgets.domain_heldout, seed=seed * 1000 + 50 + len(name))
        corpora[name] = {"train": docs[: budgets.domain_docs], "heldout": docs[budgets.domain_docs :]}
    data["corpora"] = corpora

    sizes = {"train": budgets.task_train, "test": budgets.task_test}
    data["descriptor"] = dm.build_task_datasets(dm.DESCRIPTOR_TASK, sizes, seed=seed + 11)
    data["qed"] = dm.build_task_datasets(dm.QED_TASK, sizes, seed=seed + 12)
    data["combo"] = dm.build_task_datasets(dm.COMBINATION_TASK, sizes, seed=seed + 13)
    data["affinity"] = dm.build_task_datasets(
        dm.AFFINITY_TASK,
        {"train": budgets.affinity_train, "test": budgets.task_test},
        seed=seed + 14,
        shift=True,
    )

    translate: dict[str, list[dict]] = {}
    fixed = dm.TRANSLATE_SRC_LEN
    for a, b in TRAIN_PAIRS:
        for src, tgt in ((a, b), (b, a)):
            sname, tname = LANGUAGE_NAMES[src], LANGUAGE_NAMES[tgt]
            spec = dm.cipher_language_spec(sname, perms[sname], min_len=fixed, max_len=fixed)
            translate[f"{sname}->{tname}"] = dm.build_translation_dataset(
                spec, perms[sname], perms[tname], sname, tname,
                budgets.translate_per_direction, seed=seed * 100 + src * 10 + tgt,
            )
    s6, s7 = LANGUAGE_NAMES[HELDOUT_PAIR[0]], LANGUAGE_NAMES[HELDOUT_PAIR[1]]
    spec6 = dm.cipher_language_spec(s6, perms[s6], min_len=fixed, max_len=fixed)
    spec7 = dm.cipher_language_spec(s7, perms[s7], min_len=fixed, max_len=fixed)
    translate[f"heldout:{s6}->{s7}"] = dm.build_translation_dataset(
        spec6, perms[s6], perms[s7], s6, s7, budgets.translate_test, seed=seed * 100 + 67
    )
    translate[f"heldout:{s7}->{s6}"] = dm.build_translation_dataset(
        spec7, perms[s7], perms[s6], s7, s6, budgets.translate_test, seed=seed * 100 + 76
    )
    data["translate"] = translate
    return data


# -----------------------------------------------------------------------------
# Stage runners
# -----------------------------------------------------------------------------


def _plan(stage: int, budgets: ReferenceBudgets, seed: int, **kw) -> StagePlan:
    from .protocol import make_default_plan

    plan = make_default_plan(stage)
    obj = plan.to_json()
    obj.update(seed=seed, **kw)
    return StagePlan.from_json(obj)


def run_stage1_all(
    backbone: Backbone,
    table: TagTable,
    data: dict,
    budgets: ReferenceBudgets,
    seed: int,
) -> dict[str, dict]:
    """Train every reference domain tag; returns per-tag perplexity records
    (trained vs freshly initialized control)."""
    results = {}
    for name in list(LANGUAGE_NAMES) + ["prot", "mol"]:
        init_tag(backbone, name, "domain", budgets.tag_p, table)
        plan = _plan(
            1, budgets, seed,
            trainable_tags=(name,),
            steps=budgets.stage1_steps,
            batch_size=budgets.stage1_batch,
            grad_accum=budgets.stage1_accum,
            lr=budgets.stage1_lr,
        )
        corpus = data["corpora"][name]
        report = train_stage1(backbone, table, name, corpus["train"], corpus["heldout"], plan)

        control = table.clone()
        fresh_name = f"{name}#fresh"
        init_tag(backbone, fresh_name, "domain", budgets.tag_p, control)
        ppl_fresh = domain_perplexity(backbone, control, fresh_name, corpus["heldout"])
        results[name] = {
            "ppl_trained": report.final_metric["perplexity"],
            "ppl_fresh": ppl_fresh,
            "hash_before": report.backbone_hash_before,
            "hash_after": report.backbone_hash_after,
            "trainable_params": report.total_trainable,
        }
    return results


def _task_data(name: str, template, train, heldout, head_name="", metric="mse", precision=2) -> TaskData:
    return TaskData(
        name=name, template=template, train=train, heldout=heldout,
        head_name=head_name, metric=metric, decode_precision=precision,
    )


def run_stage2_scalar_tasks(
    backbone: Backbone,
    table: TagTable,
    data: dict,
    budgets: ReferenceBudgets,
    seed: int,
) -> tuple[dict[str, TaskHead], dict]:
    """Descriptor and QED function tags + heads (stage 2, no enrichment)."""
    templates = builtin_templates()
    heads: dict[str, TaskHead] = {}
    results = {}
    for task_name in ("descriptor", "qed"):
        init_tag(backbone, task_name, "function", budgets.tag_p, table)
        head = make_head(task_name, "regression", backbone.config.embed_dim)
        heads[task_name] = head
        splits = data[task_name]
        task = _task_data(task_name, templates[task_name], splits["train"], splits["test"], head_name=task_name)
        plan = _plan(
            2, budgets, seed,
            trainable_tags=(task_name,),
            trainable_heads=(task_name,),
            steps=budgets.stage2_steps,
            lr=budgets.stage2_lr,
        )
        report = train_stage2(backbone, table, task_name, head, task, plan)
        metrics = report.final_metric[task_name]
        labels = np.array([r["label"] for r in splits["test"]])
        nn = baseline_nearest_neighbor(task, "mse", seed=seed)
        results[task_name] = {
            "mse": metrics["mse"],
            "mae": metrics["mae"],
            "pearson": metrics["pearson"],
            "label_variance": float(labels.var()),
            "nn_mse": nn.metric_value,
            "hash_before": report.backbone_hash_before,
            "hash_after": report.backbone_hash_after,
            "trainable_params": report.total_trainable,
        }
    return heads, results


def run_stage3_translate(
    backbone: Backbone,
    table: TagTable,
    data: dict,
    budgets: ReferenceBudgets,
    seed: int,
) -> tuple[TrainReport, dict]:
    """The shared translate function tag over the five seen pairs (both
    directions), then the held-out-pair zero-shot evaluation with its
    fresh-tag control."""
    templates = builtin_templates()
    init_tag(backbone, "translate", "function", budgets.tag_p, table)
    tasks = []
    for key, records in data["translate"].items():
        if key.startswith("heldout:"):
            continue
        tasks.append(
            _task_data(f"translate:{key}", templates["translate"], records, [], metric="token_accuracy")
        )
    plan = _plan(
        3, budgets, seed,
        trainable_tags=("translate",),
        steps=budgets.translate_steps,
        lr=budgets.translate_lr,
    )
    report = train_stage3(backbone, table, "translate", {}, tasks, plan)

    s6, s7 = LANGUAGE_NAMES[HELDOUT_PAIR[0]], LANGUAGE_NAMES[HELDOUT_PAIR[1]]
    heldout_records = (
        data["translate"][f"heldout:{s6}->{s7}"] + data["translate"][f"heldout:{s7}->{s6}"]
    )
    heldout_task = _task_data(
        f"translate:{s6}<->{s7}", templates["translate"], [], heldout_records, metric="token_accuracy"
    )
    zs_reports = zero_shot_composition_eval(
        backbone, table, heldout_task, s6, s7, report.manifest,
        alphabet_size=len(dm.CIPHER_BASE_ALPHABET), seed=seed,
    )
    seen_eval = evaluate_task(
        backbone, table,
        _task_data("translate:seen", templates["translate"], [], tasks[0].train[: budgets.translate_test // 2]),
        None,
    )
    results = {
        "zero_shot_token_accuracy": zs_reports[0].metric_value,
        "zero_shot_exact_match": zs_reports[0].extras["exact_match"],
        "control_token_accuracy": zs_reports[1].metric_value,
        "chance": zs_reports[0].extras["chance"],
        "seen_pair_token_accuracy": seen_eval["token_accuracy"],
        "hash_before": report.backbone_hash_before,
        "hash_after": report.backbone_hash_after,
        "manifest": report.manifest,
    }
    return report, results


def run_stage3_affinity(
    backbone: Backbone,
    table: TagTable,
    heads: dict[str, TaskHead],
    data: dict,
    budgets: ReferenceBudgets,
    seed: int,
) -> dict:
    """Cross-domain affinity function tag + head, evaluated on the unshifted
    and length-shifted test splits."""
    templates = builtin_templates()
    init_tag(backbone, "affinity", "function", budgets.tag_p, table)
    head = make_head("affinity", "regression", backbone.config.embed_dim)
    heads["affinity"] = head
    splits = data["affinity"]
    task = _task_data(
        "affinity", templates["cross_affinity"], splits["train"], splits["test"],
        head_name="affinity", metric="pearson",
    )
    plan = _plan(
        3, budgets, seed,
        trainable_tags=("affinity",),
        trainable_heads=("affinity",),
        steps=budgets.affinity_steps,
        lr=budgets.affinity_lr,
    )
    report = train_stage3(backbone, table, "affinity", heads, [task], plan)

    preds_u, targets_u = regression_predictions(backbone, table, task, head, splits["test"])
    r_unshifted, def_u = metric_pearson(preds_u, targets_u)
    preds_s, targets_s = regression_predictions(backbone, table, task, head, splits["test_shifted"])
    r_shifted, def_s = metric_pearson(preds_s, targets_s)
    return {
        "pearson_unshifted": r_unshifted,
        "pearson_shifted": r_shifted,
        "pearson_defined": bool(def_u and def_s),
        "mse_unshifted": float(((preds_u - targets_u) ** 2).mean()),
        "mse_shifted": float(((preds_s - targets_s) ** 2).mean()),
        "hash_before": report.backbone_hash_before,
        "hash_after": report.backbone_hash_after,
        "trainable_params": report.total_trainable,
    }


# -----------------------------------------------------------------------------
# Full pipeline
# -----------------------------------------------------------------------------


@dataclass
class PipelineResult:
    seed: int
    backbone_hash: str
    pretrain: dict
    stage1: dict
    stage2: dict
    translate: dict
    affinity: dict
    frozen_tag_check: dict
    wall_time_s: float

    def metrics_dict(self) -> dict:
        """Every reported metric, for bit-exact reproducibility comparison."""
        d = asdict(self)
        d.pop("wall_time_s")
        return d


def run_reference_pipeline(
    out_dir,
    seed: int = 0,
    budgets: ReferenceBudgets = REFERENCE_BUDGETS,
) -> PipelineResult:
    """gen-data -> pretrain -> stage 1 -> stage 2 -> stage 3 -> evals, with
    artifacts and a consolidated report written under out_dir."""
    t0 = time.monotonic()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_reference_data(seed, budgets)

    config = reference_backbone_config()
    backbone, pre_report = pretrain(
        data["general"],
        config,
        PretrainConfig(
            steps=budgets.pretrain_steps,
            batch_size=budgets.pretrain_batch,
            lr=budgets.pretrain_lr,
        ),
        seed=seed,
    )
    save_backbone(backbone, out / "backbone")
    hash_after_pretrain = param_hash(backbone)

    table = TagTable(config.vocab_size, config.embed_dim)
    stage1 = run_stage1_all(backbone, table, data, budgets, seed)
    stage1_tags_snapshot = {
        name: table.get(name).embedding.data.copy() for name in table.names()
    }

    heads, stage2 = run_stage2_scalar_tasks(backbone, table, data, budgets, seed)
    _, translate = run_stage3_translate(backbone, table, data, budgets, seed)
    affinity = run_stage3_affinity(backbone, table, heads, data, budgets, seed)

    # stage-1 domain tags must be byte-identical after stages 2 and 3
    frozen_ok = all(
        np.array_equal(stage1_tags_snapshot[name], table.get(name).embedding.data)
        for name in stage1_tags_snapshot
    )
    frozen_tag_check = {
        "domain_tags_frozen_after_stage3": bool(frozen_ok),
        "hash_stable": param_hash(backbone) == hash_after_pretrain,
    }

    save_tags(table, out / "tags.json", out / "tags.bin")
    save_heads(heads, out / "heads.json", out / "heads.bin")

    result = PipelineResult(
        seed=seed,
        backbone_hash=hash_after_pretrain,
        pretrain={
            "first_loss": pre_report.first_loss,
            "final_loss": pre_report.final_loss,
            "heldout_ce": pre_report.heldout_ce,
        },
        stage1=stage1,
        stage2=stage2,
        translate=translate,
        affinity=affinity,
        frozen_tag_check=frozen_tag_check,
        wall_time_s=time.monotonic() - t0,
    )
    with open(out / "report.json", "w") as f:
        json.dump(asdict(result), f, indent=2, sort_keys=True)
    return result
