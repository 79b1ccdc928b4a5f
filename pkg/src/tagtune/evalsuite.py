"""Metrics, PEFT-style baselines, the ablation grid, and the zero-shot
composition evaluation.

Every condition in a grid shares seed, data splits, and step budget, so
differences are attributable to the condition alone; every report carries a
trainable-parameter audit.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .backbone import Backbone
from .heads import (
    TaskHead,
    decode_numeric,
    destandardize,
    greedy_decode,
    make_head,
    predict_numeric,
)
from .protocol import StagePlan, TaskData, run_training
from .tags import TagTable, compute_init_rows, init_tag
from .templates import (
    Template,
    detokenize,
    prepend_prompt_tag,
    remove_tags,
    render,
    replace_tags_with_text,
    stage1_template,
    tokenize,
    with_function_tag,
    with_output_mode,
)


class EvalError(ValueError):
    """Missing prerequisite artifacts or invalid evaluation configuration."""


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------


def metric_mse(preds, targets) -> float:
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    return float(((p - t) ** 2).mean())


def metric_mae(preds, targets) -> float:
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    return float(np.abs(p - t).mean())


def metric_pearson(preds, targets) -> tuple[float, bool]:
    """(r, defined). Zero variance in either series makes r undefined; the
    flag is reported rather than silently zeroing."""
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if p.size < 2:
        raise EvalError("pearson needs at least 2 points")
    sp, st = p.std(), t.std()
    if sp == 0.0 or st == 0.0:
        return float("nan"), False
    r = float(((p - p.mean()) * (t - t.mean())).mean() / (sp * st))
    return r, True


def metric_token_accuracy(pred_seqs, target_seqs) -> float:
    """Matched positions / max(len) per pair, averaged."""
    scores = []
    for p, t in zip(pred_seqs, target_seqs):
        denom = max(len(p), len(t))
        if denom == 0:
            scores.append(1.0)
            continue
        matched = sum(a == b for a, b in zip(p, t))
        scores.append(matched / denom)
    return float(np.mean(scores))


def metric_exact_match(pred_seqs, target_seqs) -> float:
    return float(np.mean([list(p) == list(t) for p, t in zip(pred_seqs, target_seqs)]))


METRIC_FNS = {
    "mse": metric_mse,
    "mae": metric_mae,
}


# -----------------------------------------------------------------------------
# Task evaluation
# -----------------------------------------------------------------------------


def domain_perplexity(backbone: Backbone, table: TagTable, tag_name: str, docs: list[str]) -> float:
    """exp(mean NLL over in-domain payload tokens) with the tag prepended."""
    from .protocol import next_token_targets

    template = stage1_template(tag_name)
    total, weight = 0.0, 0.0
    for doc in docs:
        ex = render(template, {"text": doc}, table, max_len=backbone.config.context_len)
        logits, _ = backbone.forward(backbone.embed(ex.ids, table))
        targets = next_token_targets(ex.ids, backbone.config.vocab_size)
        loss = nm.cross_entropy(logits, targets, ex.lm_mask)
        ntok = float(ex.lm_mask.sum())
        total += loss.item() * ntok
        weight += ntok
    return float(np.exp(total / max(weight, 1.0)))


def regression_predictions(
    backbone: Backbone,
    table: TagTable,
    task: TaskData,
    head: TaskHead,
    records: list[dict] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    recs = task.heldout if records is None else records
    preds, targets = [], []
    for rec in recs:
        ex = render(task.template, rec, table, task.tag_alias, backbone.config.context_len)
        _, hidden = backbone.forward(backbone.embed(ex.ids, table))
        raw = predict_numeric(hidden, ex.readout_index, head).data[0, 0]
        preds.append(destandardize(head, float(raw)))
        targets.append(float(rec["label"]))
    return np.asarray(preds), np.asarray(targets)


def evaluate_task(
    backbone: Backbone,
    table: TagTable,
    task: TaskData,
    head: TaskHead | None,
    records: list[dict] | None = None,
) -> dict:
    """Metric dict on the held-out split, routed by task kind."""
    recs = task.heldout if records is None else records
    if not recs:
        raise EvalError(f"task {task.name!r}: no records to evaluate")
    out_segs = [s for s in task.template.segments if s.kind == "output"]
    generation_output = bool(out_segs) and out_segs[0].mode == "tokens"

    if head is not None and head.weight is not None:
        preds, targets = regression_predictions(backbone, table, task, head, recs)
        result = {
            "mse": metric_mse(preds, targets),
            "mae": metric_mae(preds, targets),
        }
        r, defined = metric_pearson(preds, targets)
        result["pearson"] = r
        result["pearson_defined"] = defined
        result["n"] = len(recs)
        return result

    if generation_output and out_segs[0].fld == "label":
        # digit generation for a numeric task
        train_mean = float(np.mean([r["label"] for r in task.train])) if task.train else 0.0
        preds, targets, failures = [], [], 0
        for rec in recs:
            ex = render(task.template, rec, table, task.tag_alias, backbone.config.context_len)
            value, failed = decode_numeric(
                backbone, table, ex.ids[: ex.prompt_len], task.decode_precision,
                failure_value=train_mean,
            )
            failures += int(failed)
            preds.append(value)
            targets.append(float(rec["label"]))
        result = {
            "mse": metric_mse(preds, targets),
            "mae": metric_mae(preds, targets),
            "parse_failures": failures,
            "failure_rate": failures / len(recs),
            "n": len(recs),
        }
        r, defined = metric_pearson(preds, targets)
        result["pearson"] = r
        result["pearson_defined"] = defined
        return result

    # token generation against a string field
    fld = out_segs[0].fld if out_segs else "tgt"
    pred_seqs, tgt_seqs = [], []
    for rec in recs:
        ex = render(task.template, rec, table, task.tag_alias, backbone.config.context_len)
        expected = tokenize(str(rec[fld]))
        out = greedy_decode(backbone, table, ex.ids[: ex.prompt_len], max_len=len(expected) + 8)
        pred_seqs.append(out)
        tgt_seqs.append(expected)
    return {
        "token_accuracy": metric_token_accuracy(pred_seqs, tgt_seqs),
        "exact_match": metric_exact_match(pred_seqs, tgt_seqs),
        "n": len(recs),
    }


# -----------------------------------------------------------------------------
# Reports
# -----------------------------------------------------------------------------


@dataclass
class EvalReport:
    task: str
    condition: str
    metric_name: str
    metric_value: float
    seed: int
    trainable_params: int
    audit: dict[str, int] = field(default_factory=dict)
    failures: int = 0
    runtime_s: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def render_report_table(reports: list[EvalReport]) -> str:
    """Plain-text table, one row per condition."""
    header = f"{'task':<12} {'condition':<24} {'metric':<16} {'value':>12} {'params':>10} {'seed':>5}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.task:<12} {r.condition:<24} {r.metric_name:<16} {r.metric_value:>12.5f} "
            f"{r.trainable_params:>10} {r.seed:>5}"
        )
    return "\n".join(lines)


# -----------------------------------------------------------------------------
# Ablation grid
# -----------------------------------------------------------------------------


@dataclass
class AblationSetting:
    """Everything one ablation run needs, shared across conditions."""

    task: TaskData
    function_tag: str
    domain_tags: tuple[str, ...]
    metric: str
    plan: StagePlan
    function_p: int = 10
    p_sweep: tuple[int, ...] = (1, 5, 10, 20, 50)
    decode_precision: int = 1


def _fresh_function_tag(backbone: Backbone, table: TagTable, name: str, p: int) -> str:
    if name in table:
        raise EvalError(f"function tag {name!r} already exists in this grid table")
    init_tag(backbone, name, "function", p, table)
    return name


def _condition_plan(plan: StagePlan, seed: int, trainable_tags, trainable_heads, lambda_m=None) -> StagePlan:
    obj = plan.to_json()
    obj.update(
        seed=seed,
        trainable_tags=tuple(trainable_tags),
        trainable_heads=tuple(trainable_heads),
    )
    if lambda_m is not None:
        obj["lambda_m"] = lambda_m
    return StagePlan.from_json(obj)


def run_condition(
    backbone: Backbone,
    base_table: TagTable,
    setting: AblationSetting,
    condition: str,
    seed: int,
    p_override: int | None = None,
) -> EvalReport:
    """Train and evaluate one grid condition from a fresh clone of the tag
    table, so conditions never contaminate each other."""
    t0 = time.monotonic()
    table = base_table.clone()
    task = setting.task
    d = backbone.config.embed_dim
    p = p_override if p_override is not None else setting.function_p

    fn_name = f"{setting.function_tag}#{condition}"
    template = task.template
    head: TaskHead | None = None
    enrich_alias: dict[str, str] = {}

    if condition == "full" or condition.startswith("p="):
        _fresh_function_tag(backbone, table, fn_name, p)
        template = with_function_tag(template, setting.function_tag, fn_name)
        head = make_head(fn_name, "regression", d)
        plan = _condition_plan(setting.plan, seed, [fn_name], [fn_name], lambda_m=0.0)
    elif condition == "enriched":
        _fresh_function_tag(backbone, table, fn_name, p)
        template = with_function_tag(template, setting.function_tag, fn_name)
        head = make_head(fn_name, "regression", d)
        from .tags import enrich_fork

        forks = []
        for name in setting.domain_tags:
            fork = enrich_fork(table.get(name), condition, table)
            enrich_alias[name] = fork.name
            forks.append(fork.name)
        plan = _condition_plan(setting.plan, seed, [fn_name] + forks, [fn_name], lambda_m=1.0)
    elif condition == "no_domain_tags":
        _fresh_function_tag(backbone, table, fn_name, p)
        template = remove_tags(template, set(setting.domain_tags))
        template = with_function_tag(template, setting.function_tag, fn_name)
        head = make_head(fn_name, "regression", d)
        plan = _condition_plan(setting.plan, seed, [fn_name], [fn_name], lambda_m=0.0)
    elif condition == "no_function_tag":
        template = remove_tags(template, {setting.function_tag})
        head = make_head(f"head#{condition}", "regression", d)
        plan = _condition_plan(setting.plan, seed, [], [head.name], lambda_m=0.0)
    elif condition == "no_reg_head":
        _fresh_function_tag(backbone, table, fn_name, p)
        template = with_function_tag(template, setting.function_tag, fn_name)
        template = with_output_mode(template, "tokens", precision=setting.decode_precision)
        head = None
        plan = _condition_plan(setting.plan, seed, [fn_name], [], lambda_m=0.0)
    else:
        raise EvalError(f"unknown ablation condition {condition!r}")

    cond_task = TaskData(
        name=task.name,
        template=template,
        train=task.train,
        heldout=task.heldout,
        head_name=head.name if head else "",
        metric=setting.metric,
        tag_alias=enrich_alias,
        decode_precision=setting.decode_precision,
    )
    heads = {head.name: head} if head else {}
    if head is not None and head.kind == "regression":
        from .heads import fit_standardizer

        fit_standardizer(head, [r["label"] for r in cond_task.train])
    train_report = run_training(backbone, table, [cond_task], heads, plan)
    metrics = evaluate_task(backbone, table, cond_task, head)
    value = metrics.get(setting.metric, metrics.get("mse"))
    return EvalReport(
        task=task.name,
        condition=condition,
        metric_name=setting.metric,
        metric_value=float(value),
        seed=seed,
        trainable_params=train_report.total_trainable,
        audit=train_report.audit,
        failures=int(metrics.get("parse_failures", 0)),
        runtime_s=time.monotonic() - t0,
        extras={k: v for k, v in metrics.items() if isinstance(v, (int, float, bool))},
    )


def run_ablation(
    backbone: Backbone,
    table: TagTable,
    setting: AblationSetting,
    seeds: tuple[int, ...] = (0,),
    conditions: tuple[str, ...] = ("full", "enriched", "no_domain_tags", "no_function_tag", "no_reg_head"),
    sweep: bool = True,
) -> list[EvalReport]:
    """The ablation grid: tag removals, enrichment, the digit-generation path,
    and the tag-length sweep, all under identical seeds and budgets."""
    for name in setting.domain_tags:
        if name not in table:
            raise EvalError(f"missing prerequisite artifact: stage-1 domain tag {name!r}")
    reports = []
    for seed in seeds:
        for condition in conditions:
            reports.append(run_condition(backbone, table, setting, condition, seed))
    if sweep:
        for p in setting.p_sweep:
            reports.append(run_condition(backbone, table, setting, f"p={p}", seeds[0], p_override=p))
    return reports


# -----------------------------------------------------------------------------
# Baselines
# -----------------------------------------------------------------------------


def baseline_prompt_tuning(
    backbone: Backbone,
    table: TagTable,
    task: TaskData,
    total_len: int,
    plan: StagePlan,
    metric: str,
    seed: int = 0,
) -> EvalReport:
    """A single randomly initialized soft prompt of the matched total tag
    length, prepended globally; trained with the same head machinery."""
    t0 = time.monotonic()
    work = table.clone()
    d = backbone.config.embed_dim
    rng = nm.make_rng(seed + 7919)
    from .numerics import Tensor
    from .tags import TagSpec

    name = f"prompt#{task.name}#{seed}"
    emb = Tensor(rng.normal(0.0, 0.02, size=(total_len, d)).astype(np.float32))
    work.register(TagSpec(name=name, kind="function", p=total_len, embedding=emb))
    template = prepend_prompt_tag(task.template, name)
    head = make_head(name, "regression", d)
    from .heads import fit_standardizer

    fit_standardizer(head, [r["label"] for r in task.train])
    cond_task = TaskData(
        name=task.name, template=template, train=task.train, heldout=task.heldout,
        head_name=name, metric=metric,
    )
    run_plan = _condition_plan(plan, seed, [name], [name], lambda_m=0.0)
    train_report = run_training(backbone, work, [cond_task], {name: head}, run_plan)
    metrics = evaluate_task(backbone, work, cond_task, head)
    return EvalReport(
        task=task.name,
        condition="prompt_tuning",
        metric_name=metric,
        metric_value=float(metrics[metric]),
        seed=seed,
        trainable_params=train_report.total_trainable,
        audit=train_report.audit,
        runtime_s=time.monotonic() - t0,
        extras={k: v for k, v in metrics.items() if isinstance(v, (int, float, bool))},
    )


def baseline_linear_probe(
    backbone: Backbone,
    table: TagTable,
    task: TaskData,
    plan: StagePlan,
    metric: str,
    seed: int = 0,
) -> EvalReport:
    """No tags at all: a d x d_t head on the last prompt token's hidden state."""
    t0 = time.monotonic()
    work = table.clone()
    tag_names = {s.name for s in task.template.segments if s.kind == "tag" and s.name}
    template = remove_tags(task.template, tag_names)
    d = backbone.config.embed_dim
    head = make_head(f"probe#{task.name}#{seed}", "regression", d)
    from .heads import fit_standardizer

    fit_standardizer(head, [r["label"] for r in task.train])
    cond_task = TaskData(
        name=task.name, template=template, train=task.train, heldout=task.heldout,
        head_name=head.name, metric=metric,
    )
    run_plan = _condition_plan(plan, seed, [], [head.name], lambda_m=0.0)
    train_report = run_training(backbone, work, [cond_task], {head.name: head}, run_plan)
    metrics = evaluate_task(backbone, work, cond_task, head)
    return EvalReport(
        task=task.name,
        condition="linear_probing",
        metric_name=metric,
        metric_value=float(metrics[metric]),
        seed=seed,
        trainable_params=train_report.total_trainable,
        audit=train_report.audit,
        runtime_s=time.monotonic() - t0,
        extras={k: v for k, v in metrics.items() if isinstance(v, (int, float, bool))},
    )


def baseline_text_domain_info(
    backbone: Backbone,
    table: TagTable,
    task: TaskData,
    domain_tags: tuple[str, ...],
    function_tag: str,
    plan: StagePlan,
    metric: str,
    seed: int = 0,
    function_p: int = 10,
) -> EvalReport:
    """Domain tags replaced by literal text naming the domain; the function
    tag and head train as usual."""
    t0 = time.monotonic()
    work = table.clone()
    d = backbone.config.embed_dim
    fn_name = f"{function_tag}#textdom#{seed}"
    init_tag(backbone, fn_name, "function", function_p, work)
    template = replace_tags_with_text(task.template, set(domain_tags))
    template = with_function_tag(template, function_tag, fn_name)
    head = make_head(fn_name, "regression", d)
    from .heads import fit_standardizer

    fit_standardizer(head, [r["label"] for r in task.train])
    cond_task = TaskData(
        name=task.name, template=template, train=task.train, heldout=task.heldout,
        head_name=fn_name, metric=metric,
    )
    run_plan = _condition_plan(plan, seed, [fn_name], [fn_name], lambda_m=0.0)
    train_report = run_training(backbone, work, [cond_task], {fn_name: head}, run_plan)
    metrics = evaluate_task(backbone, work, cond_task, head)
    return EvalReport(
        task=task.name,
        condition="text_domain_info",
        metric_name=metric,
        metric_value=float(metrics[metric]),
        seed=seed,
        trainable_params=train_report.total_trainable,
        audit=train_report.audit,
        runtime_s=time.monotonic() - t0,
        extras={k: v for k, v in metrics.items() if isinstance(v, (int, float, bool))},
    )


def lcs_length(a: str, b: str) -> int:
    """Longest common subsequence length, row DP vectorized over b.

    Row update: t[j+1] = max(prev[j+1], prev[j] + eq[j]), then a prefix max
    realizes the cur[j] dependency (LCS rows are monotone in j).
    """
    if not a or not b:
        return 0
    bn = np.frombuffer(b.encode("latin-1"), dtype=np.uint8)
    prev = np.zeros(len(bn) + 1, dtype=np.int32)
    t = np.zeros(len(bn) + 1, dtype=np.int32)
    for ca in a.encode("latin-1"):
        t[0] = 0
        np.maximum(prev[1:], prev[:-1] + (bn == ca), out=t[1:])
        np.maximum.accumulate(t, out=prev)
    return int(prev[-1])


def similarity_ratio(a: str, b: str) -> float:
    """2*LCS/(|a|+|b|); 0 for two empty strings."""
    denom = len(a) + len(b)
    if denom == 0:
        return 0.0
    return 2.0 * lcs_length(a, b) / denom


def _payload_fields(template: Template) -> list[str]:
    return [s.fld for s in template.segments if s.kind == "payload"]


def baseline_nearest_neighbor(task: TaskData, metric: str, seed: int = 0) -> EvalReport:
    """Predict each test record's label from the most similar training record
    (similarity ratio over concatenated payloads; lowest index wins ties)."""
    t0 = time.monotonic()
    if not task.train:
        raise EvalError("nearest neighbor baseline: empty training set")
    fields = _payload_fields(task.template)
    train_keys = ["".join(str(r[f]) for f in fields) for r in task.train]
    preds, targets = [], []
    for rec in task.heldout:
        key = "".join(str(rec[f]) for f in fields)
        best_score, best_idx = -1.0, 0
        for i, tk in enumerate(train_keys):
            s = similarity_ratio(key, tk)
            if s > best_score:
                best_score, best_idx = s, i
        preds.append(float(task.train[best_idx]["label"]))
        targets.append(float(rec["label"]))
    fn = METRIC_FNS.get(metric, metric_mse)
    return EvalReport(
        task=task.name,
        condition="nearest_neighbor",
        metric_name=metric,
        metric_value=float(fn(preds, targets)),
        seed=seed,
        trainable_params=0,
        runtime_s=time.monotonic() - t0,
        extras={"mse": metric_mse(preds, targets), "mae": metric_mae(preds, targets)},
    )


# -----------------------------------------------------------------------------
# Zero-shot composition
# -----------------------------------------------------------------------------


def zero_shot_composition_eval(
    backbone: Backbone,
    table: TagTable,
    translate_task: TaskData,
    src_tag: str,
    tgt_tag: str,
    stage3_manifest: list[str],
    alphabet_size: int,
    seed: int = 0,
) -> list[EvalReport]:
    """Evaluate the stage-3 function tag on a language pair whose domain tags
    saw only stage 1, with a fresh-untrained-tag control and the chance level
    in the same report set."""
    pair_name = f"{src_tag}->{tgt_tag}"
    for entry in stage3_manifest:
        if src_tag in entry and tgt_tag in entry:
            raise EvalError(
                f"configuration error: pair {pair_name} appears in the stage-3 "
                f"training manifest entry {entry!r}"
            )
    t0 = time.monotonic()
    metrics = evaluate_task(backbone, table, translate_task, None)

    control_table = table.clone()
    rows, _ = compute_init_rows(backbone.token_emb.data, control_table.get(src_tag).p)
    for name in (src_tag, tgt_tag):
        spec = control_table.get(name)
        spec.embedding.data[:] = rows.astype(spec.embedding.data.dtype)
    control_task = TaskData(**{**translate_task.__dict__})
    control_metrics = evaluate_task(backbone, control_table, control_task, None)

    chance = 1.0 / alphabet_size
    shared = {
        "task": translate_task.name,
        "metric_name": "token_accuracy",
        "seed": seed,
        "trainable_params": 0,
        "runtime_s": time.monotonic() - t0,
    }
    return [
        EvalReport(
            condition=f"zero_shot:{pair_name}",
            metric_value=float(metrics["token_accuracy"]),
            extras={"exact_match": metrics["exact_match"], "chance": chance, "n": metrics["n"]},
            **shared,
        ),
        EvalReport(
            condition=f"fresh_tag_control:{pair_name}",
            metric_value=float(control_metrics["token_accuracy"]),
            extras={"exact_match": control_metrics["exact_match"], "chance": chance, "n": control_metrics["n"]},
            **shared,
        ),
    ]
