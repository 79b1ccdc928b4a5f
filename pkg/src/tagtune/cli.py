"""Command-line entry point: data generation, pretraining, tag/head training,
evaluation, ablations, zero-shot composition, and artifact inspection.

Every command reads a JSON config (with dotted-path --override), writes its
artifacts under --out with fixed filenames, and records a manifest.json
carrying the command, config hash, seed, artifact hashes, and wall time.
Errors exit nonzero with a single-line `ERROR <code>: message`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import domains as dm
from . import pipeline as pl
from .backbone import BackboneError, load_backbone, param_hash, save_backbone
from .evalsuite import AblationSetting, EvalError, render_report_table, run_ablation
from .heads import load_heads
from .numerics import NumericsError
from .protocol import PlanError, StagePlan
from .tags import TagError, load_tags
from .templates import TemplateError, VocabularyError

ERROR_CODES = {
    FileNotFoundError: "missing-artifact",
    pl.PipelineError: "missing-artifact",
    EvalError: "eval",
    PlanError: "plan",
    TagError: "tag",
    TemplateError: "template",
    VocabularyError: "vocabulary",
    BackboneError: "backbone",
    NumericsError: "numerics",
    dm.DomainError: "domain",
    KeyError: "config",
    ValueError: "config",
}


def _error_code(exc: BaseException) -> str:
    for cls, code in ERROR_CODES.items():
        if isinstance(exc, cls):
            return code
    return "internal"


# -----------------------------------------------------------------------------
# Config handling
# -----------------------------------------------------------------------------


def load_config(path: str | None, overrides: list[str]) -> dict:
    config: dict = {}
    if path:
        with open(path) as f:
            config = json.load(f)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def budgets_from_config(config: dict) -> pl.ReferenceBudgets:
    fields = {f.name for f in pl.ReferenceBudgets.__dataclass_fields__.values()}
    kwargs = {k: v for k, v in config.get("budgets", {}).items() if k in fields}
    return pl.ReferenceBudgets(**kwargs)


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, t0: float) -> None:
    artifacts = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[str(p.relative_to(out_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": seed,
        "artifacts": artifacts,
        "wall_time_s": time.monotonic() - t0,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise pl.PipelineError(f"missing prerequisite artifact: {what} at {path}")
    return path


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    budgets = budgets_from_config(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = pl.build_reference_data(args.seed, budgets)
    with open(out / "general_corpus.jsonl", "w") as f:
        for doc in data["general"]:
            f.write(json.dumps({"text": doc}) + "\n")
    for name, corpus in data["corpora"].items():
        dm.save_jsonl([{"text": s} for s in corpus["train"]], out / f"corpus_{name}_train.jsonl")
        dm.save_jsonl([{"text": s} for s in corpus["heldout"]], out / f"corpus_{name}_heldout.jsonl")
    for task in ("descriptor", "qed", "combo", "affinity"):
        for split, records in data[task].items():
            dm.save_jsonl(records, out / f"{task}_{split}.jsonl")
    for key, records in data["translate"].items():
        safe = key.replace(":", "_").replace(">", "")
        dm.save_jsonl(records, out / f"translate_{safe}.jsonl")
    specs = {
        "prot": dm.protein_spec().to_json(),
        "mol": dm.molecule_spec().to_json(),
        **{n: dm.cipher_language_spec(n, p).to_json() for n, p in pl.language_permutations().items()},
    }
    with open(out / "domain_specs.json", "w") as f:
        json.dump(specs, f, indent=2, sort_keys=True)
    write_manifest(out, "gen-data", config, args.seed, t0)
    print(f"wrote datasets to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .backbone import PretrainConfig, pretrain

    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    budgets = budgets_from_config(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = pl.build_reference_data(args.seed, budgets)
    backbone, report = pretrain(
        data["general"],
        pl.reference_backbone_config(),
        PretrainConfig(steps=budgets.pretrain_steps, batch_size=budgets.pretrain_batch, lr=budgets.pretrain_lr),
        seed=args.seed,
    )
    save_backbone(backbone, out / "backbone")
    with open(out / "report.json", "w") as f:
        json.dump(
            {
                "first_loss": report.first_loss,
                "final_loss": report.final_loss,
                "heldout_ce": report.heldout_ce,
                "backbone_hash": param_hash(backbone),
            },
            f, indent=2, sort_keys=True,
        )
    write_manifest(out, "pretrain", config, args.seed, t0)
    print(f"backbone {param_hash(backbone)[:12]} heldout_ce={report.heldout_ce:.4f}")
    return 0


def cmd_run_pipeline(args) -> int:
    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    budgets = budgets_from_config(config)
    out = Path(args.out)
    result = pl.run_reference_pipeline(out, seed=args.seed, budgets=budgets)
    write_manifest(out, "run-pipeline", config, args.seed, t0)
    print(json.dumps(result.metrics_dict()["translate"], indent=2, sort_keys=True))
    return 0


def _load_pipeline_artifacts(artifact_dir: str):
    root = Path(artifact_dir)
    backbone = load_backbone(_require(root / "backbone", "backbone checkpoint"))
    table = load_tags(
        _require(root / "tags.json", "tag registry"),
        _require(root / "tags.bin", "tag weights"),
        expect_d=backbone.config.embed_dim,
    )
    return root, backbone, table


def cmd_train_domain_tag(args) -> int:
    from .protocol import train_stage1
    from .tags import init_tag, save_tags

    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    budgets = budgets_from_config(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_backbone(_require(Path(args.backbone), "backbone checkpoint"))
    from .tags import TagTable

    tags_json = Path(args.backbone).parent / "tags.json"
    if tags_json.exists():
        table = load_tags(tags_json, tags_json.with_suffix(".bin"), expect_d=backbone.config.embed_dim)
    else:
        table = TagTable(backbone.config.vocab_size, backbone.config.embed_dim)
    data = pl.build_reference_data(args.seed, budgets)
    name = args.tag
    if name not in data["corpora"]:
        raise pl.PipelineError(f"missing prerequisite artifact: corpus for domain {name!r}")
    init_tag(backbone, name, "domain", budgets.tag_p, table)
    plan = StagePlan(
        stage=1, trainable_tags=(name,), lambda_f=0.0, lambda_m=1.0,
        steps=budgets.stage1_steps, batch_size=budgets.stage1_batch,
        grad_accum=budgets.stage1_accum, lr=budgets.stage1_lr, seed=args.seed,
    )
    corpus = data["corpora"][name]
    report = train_stage1(backbone, table, name, corpus["train"], corpus["heldout"], plan)
    save_tags(table, out / "tags.json", out / "tags.bin")
    with open(out / "report.json", "w") as f:
        json.dump(report.core_dict(), f, indent=2, sort_keys=True)
    with open(out / "metrics.jsonl", "w") as f:
        for rec in report.steps:
            f.write(json.dumps(rec) + "\n")
    write_manifest(out, "train-domain-tag", config, args.seed, t0)
    print(f"tag {name}: heldout perplexity {report.final_metric['perplexity']:.4f}")
    return 0


def cmd_train_function_tag(args) -> int:
    from .heads import make_head, save_heads
    from .protocol import TaskData, make_default_plan, train_stage2, train_stage3
    from .tags import init_tag, save_tags
    from .templates import builtin_templates

    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    budgets = budgets_from_config(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root, backbone, table = _load_pipeline_artifacts(args.artifacts)
    data = pl.build_reference_data(args.seed, budgets)
    templates = builtin_templates()
    task_name = args.task
    d = backbone.config.embed_dim

    base_plan = make_default_plan(args.stage, task_name)
    plan_obj = base_plan.to_json()
    plan_obj.update(seed=args.seed)
    plan_obj.update(config.get("plan", {}))

    if task_name in ("descriptor", "qed", "combo"):
        if args.stage != 2:
            raise PlanError(f"task {task_name!r} is single-domain: use --stage 2")
        for dom in {"descriptor": ("prot",), "qed": ("mol",), "combo": ("mol",)}[task_name]:
            if dom not in table:
                raise pl.PipelineError(f"missing prerequisite artifact: stage-1 domain tag {dom!r}")
        init_tag(backbone, task_name, "function", budgets.tag_p, table)
        head = make_head(task_name, "regression", d)
        splits = data[task_name] if task_name != "combo" else data["combo"]
        template = templates[task_name if task_name != "combo" else "pair_combination"]
        task = TaskData(name=task_name, template=template, train=splits["train"],
                        heldout=splits["test"], head_name=task_name)
        enrich = tuple(config.get("enrich", ()))
        plan_obj.update(trainable_tags=(task_name,), trainable_heads=(task_name,))
        plan = StagePlan.from_json(plan_obj)
        report = train_stage2(backbone, table, task_name, head, task, plan, enrich=enrich)
        heads = {task_name: head}
    elif task_name == "affinity":
        if args.stage != 3:
            raise PlanError("task 'affinity' is multi-domain: use --stage 3")
        for dom in ("prot", "mol"):
            if dom not in table:
                raise pl.PipelineError(f"missing prerequisite artifact: stage-1 domain tag {dom!r}")
        init_tag(backbone, "affinity", "function", budgets.tag_p, table)
        head = make_head("affinity", "regression", d)
        splits = data["affinity"]
        task = TaskData(name="affinity", template=templates["cross_affinity"],
                        train=splits["train"], heldout=splits["test"],
                        head_name="affinity", metric="pearson")
        plan_obj.update(trainable_tags=("affinity",), trainable_heads=("affinity",), lambda_m=0.0)
        plan = StagePlan.from_json(plan_obj)
        report = train_stage3(backbone, table, "affinity", {"affinity": head}, [task], plan)
        heads = {"affinity": head}
    elif task_name == "translate":
        if args.stage != 3:
            raise PlanError("task 'translate' is cross-domain: use --stage 3")
        for name in pl.LANGUAGE_NAMES:
            if name not in table:
                raise pl.PipelineError(f"missing prerequisite artifact: stage-1 domain tag {name!r}")
        init_tag(backbone, "translate", "function", budgets.tag_p, table)
        tasks = [
            TaskData(name=f"translate:{key}", template=templates["translate"],
                     train=records, heldout=[], metric="token_accuracy")
            for key, records in data["translate"].items()
            if not key.startswith("heldout:")
        ]
        plan_obj.update(trainable_tags=("translate",), lambda_m=0.0)
        plan = StagePlan.from_json(plan_obj)
        report = train_stage3(backbone, table, "translate", {}, tasks, plan)
        heads = {}
    else:
        raise ValueError(f"unknown task {task_name!r}")

    save_tags(table, out / "tags.json", out / "tags.bin")
    save_heads(heads, out / "heads.json", out / "heads.bin")
    with open(out / "report.json", "w") as f:
        json.dump(report.core_dict(), f, indent=2, sort_keys=True)
    with open(out / "metrics.jsonl", "w") as f:
        for rec in report.steps:
            f.write(json.dumps(rec) + "\n")
    write_manifest(out, "train-function-tag", config, args.seed, t0)
    print(f"trained {task_name} (stage {args.stage}); trainable params {report.total_trainable}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    root, backbone, table = _load_pipeline_artifacts(args.artifacts)
    report_path = _require(root / "report.json", "pipeline report")
    with open(report_path) as f:
        report = json.load(f)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "stage1": {k: v["ppl_trained"] for k, v in report["stage1"].items()},
        "stage2": {k: v["mse"] for k, v in report["stage2"].items()},
        "translate": report["translate"],
        "affinity": {
            "pearson_unshifted": report["affinity"]["pearson_unshifted"],
            "pearson_shifted": report["affinity"]["pearson_shifted"],
        },
        "backbone_hash": param_hash(backbone),
    }
    with open(out / "report.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    write_manifest(out, "eval", config, args.seed, t0)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    budgets = budgets_from_config(config)
    root, backbone, table = _load_pipeline_artifacts(args.artifacts)
    if "mol" not in table:
        raise pl.PipelineError("missing prerequisite artifact: stage-1 domain tag 'mol'")
    data = pl.build_reference_data(args.seed, budgets)
    from .protocol import TaskData
    from .templates import builtin_templates

    ab_cfg = config.get("ablation", {})
    setting = AblationSetting(
        task=TaskData(
            name="combo",
            template=builtin_templates()["pair_combination"],
            train=data["combo"]["train"],
            heldout=data["combo"]["test"],
            metric="mae",
            decode_precision=1,
        ),
        function_tag="combo",
        domain_tags=("mol",),
        metric="mae",
        plan=StagePlan(
            stage=2,
            lambda_f=1.0,
            lambda_m=0.0,
            steps=int(ab_cfg.get("steps", 180)),
            lr=float(ab_cfg.get("lr", 0.01)),
            seed=args.seed,
        ),
        function_p=budgets.tag_p,
    )
    seeds = tuple(ab_cfg.get("seeds", [args.seed]))
    reports = run_ablation(backbone, table, setting, seeds=seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    table_text = render_report_table(reports)
    (out / "ablation_table.txt").write_text(table_text + "\n")
    write_manifest(out, "ablate", config, args.seed, t0)
    print(table_text)
    return 0


def cmd_compose(args) -> int:
    from .evalsuite import zero_shot_composition_eval
    from .protocol import TaskData
    from .templates import builtin_templates

    t0 = time.monotonic()
    config = load_config(args.config, args.override)
    budgets = budgets_from_config(config)
    root, backbone, table = _load_pipeline_artifacts(args.artifacts)
    with open(_require(root / "report.json", "pipeline report")) as f:
        report = json.load(f)
    manifest = report["translate"]["manifest"]
    data = pl.build_reference_data(args.seed, budgets)
    s6 = pl.LANGUAGE_NAMES[pl.HELDOUT_PAIR[0]]
    s7 = pl.LANGUAGE_NAMES[pl.HELDOUT_PAIR[1]]
    heldout = data["translate"][f"heldout:{s6}->{s7}"] + data["translate"][f"heldout:{s7}->{s6}"]
    task = TaskData(
        name=f"translate:{s6}<->{s7}", template=builtin_templates()["translate"],
        train=[], heldout=heldout, metric="token_accuracy",
    )
    reports = zero_shot_composition_eval(
        backbone, table, task, s6, s7, manifest,
        alphabet_size=len(dm.CIPHER_BASE_ALPHABET), seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    write_manifest(out, "compose", config, args.seed, t0)
    print(render_report_table(reports))
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.artifact)
    if not path.exists():
        raise pl.PipelineError(f"missing prerequisite artifact: nothing at {path}")
    if path.is_dir() and (path / "config.json").exists():
        backbone = load_backbone(path)
        print(f"backbone checkpoint at {path}")
        print(f"  config: {backbone.config}")
        print(f"  param_hash: {param_hash(backbone)}")
        for name, p in backbone.parameters().items():
            print(f"  {name}: shape={tuple(p.data.shape)} norm={float(np.linalg.norm(p.data)):.4f}")
        return 0
    if path.name.endswith("tags.json"):
        table = load_tags(path, path.with_suffix(".bin"))
        print(f"tag table: base_vocab={table.base_vocab_size} d={table.d} tags={len(table)}")
        for name in table.names():
            spec = table.get(name)
            rows = spec.embedding.data
            norms = np.linalg.norm(rows.astype(np.float64), axis=1)
            identical = bool(np.all(rows == rows[0]))
            print(
                f"  {name}: kind={spec.kind} p={spec.p} id={spec.tag_id} status={spec.status} "
                f"row_norm_mean={norms.mean():.5f} rows_identical={identical} lineage={spec.lineage}"
            )
        return 0
    if path.name.endswith("heads.json"):
        heads = load_heads(path, path.with_suffix(".bin"))
        for name, h in heads.items():
            wnorm = 0.0 if h.weight is None else float(np.linalg.norm(h.weight.data))
            print(
                f"  {name}: kind={h.kind} d_t={h.d_t} loss={h.loss} "
                f"mean={h.target_mean:.4f} std={h.target_std:.4f} weight_norm={wnorm:.4f}"
            )
        return 0
    if path.suffix == ".json":
        with open(path) as f:
            print(json.dumps(json.load(f), indent=2, sort_keys=True))
        return 0
    raise pl.PipelineError(f"missing prerequisite artifact: {path} is not an inspectable artifact")


# -----------------------------------------------------------------------------
# Entry point
# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tagtune",
        description="Train and evaluate domain/function tag embeddings on a frozen toy LM.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        if needs_out:
            p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override (value parsed as JSON when possible)")

    p = sub.add_parser("gen-data", help="generate corpora and labeled datasets")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the backbone on the general corpus")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("run-pipeline", help="full reference pipeline into one directory")
    common(p)
    p.set_defaults(fn=cmd_run_pipeline)

    p = sub.add_parser("train-domain-tag", help="stage 1: train one domain tag")
    common(p)
    p.add_argument("--backbone", required=True, help="backbone checkpoint directory")
    p.add_argument("--tag", required=True, help="domain name (lang0..lang7, prot, mol)")
    p.set_defaults(fn=cmd_train_domain_tag)

    p = sub.add_parser("train-function-tag", help="stage 2 or 3: train a function tag + head")
    common(p)
    p.add_argument("--artifacts", required=True, help="pipeline artifact directory (backbone + stage-1 tags)")
    p.add_argument("--task", required=True, choices=["descriptor", "qed", "combo", "affinity", "translate"])
    p.add_argument("--stage", type=int, required=True, choices=[2, 3])
    p.set_defaults(fn=cmd_train_function_tag)

    p = sub.add_parser("eval", help="summarize metrics from a pipeline run")
    common(p)
    p.add_argument("--artifacts", required=True, help="pipeline artifact directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid on the pair-combination task")
    common(p)
    p.add_argument("--artifacts", required=True, help="pipeline artifact directory")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("compose", help="zero-shot composition eval on the held-out pair")
    common(p)
    p.add_argument("--artifacts", required=True, help="pipeline artifact directory")
    p.set_defaults(fn=cmd_compose)

    p = sub.add_parser("inspect", help="human-readable summary of an artifact")
    p.add_argument("artifact", help="backbone dir, tags.json, heads.json, or report.json")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001 - single-line machine-parseable errors
        print(f"ERROR {_error_code(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
