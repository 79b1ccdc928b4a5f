"""Three-stage training orchestration: parameter routing, loss composition,
multi-task mixing, and the default hyperparameters.

Stage 1 trains one domain tag with the in-domain next-token loss; stage 2
trains a function tag plus its head on one labeled dataset (optionally
enriching forked domain-tag copies); stage 3 trains a cross-domain function
tag with per-task heads over several datasets. The backbone is frozen in
every stage, enforced by gradient routing and checked by hashing.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .backbone import Backbone, param_hash
from .heads import TaskHead, fit_standardizer, standardize
from .numerics import AdamW, Tensor, cosine_lr
from .tags import TagTable, enrich_fork
from .templates import RenderedExample, Template, render, stage1_template


class PlanError(ValueError):
    """StagePlan violates the stage's invariants."""


@dataclass
class StagePlan:
    stage: int
    trainable_tags: tuple[str, ...] = ()
    trainable_heads: tuple[str, ...] = ()
    lambda_f: float = 1.0
    lambda_m: float = 0.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_fraction: float = 0.03
    steps: int = 400
    batch_size: int = 4
    grad_accum: int = 8
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "StagePlan":
        obj = dict(obj)
        for key in ("trainable_tags", "trainable_heads"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return StagePlan(**obj)


# Toy-scale step budgets standing in for the per-task epoch counts used at
# full scale (translate 1, descriptor 4, qed 2, combination 2, affinity 4).
DEFAULT_STEP_BUDGETS = {
    "translate": 600,
    "descriptor": 500,
    "qed": 350,
    "combo": 350,
    "affinity": 600,
}


def make_default_plan(stage: int, task: str = "") -> StagePlan:
    """AdamW, lr 1e-4, no weight decay, cosine schedule with 0.03 warmup,
    batch 4 with gradient accumulation 8; loss weights by stage."""
    if stage == 1:
        lf, lm = 0.0, 1.0
    elif stage == 2:
        lf, lm = 1.0, 1.0
    elif stage == 3:
        lf, lm = 1.0, 0.0
    else:
        raise PlanError(f"stage must be 1, 2 or 3, got {stage}")
    return StagePlan(
        stage=stage,
        lambda_f=lf,
        lambda_m=lm,
        steps=DEFAULT_STEP_BUDGETS.get(task, 400),
    )


@dataclass
class TaskData:
    """One dataset wired to a template and (optionally) a head."""

    name: str
    template: Template
    train: list[dict]
    heldout: list[dict] = field(default_factory=list)
    head_name: str = ""
    metric: str = "mse"
    tag_alias: dict[str, str] = field(default_factory=dict)
    decode_precision: int = 2


@dataclass
class TrainReport:
    stage: int
    seed: int
    steps: list[dict]
    final_metric: dict
    audit: dict[str, int]
    total_trainable: int
    backbone_hash_before: str
    backbone_hash_after: str
    manifest: list[str]
    wall_time_s: float

    def core_dict(self) -> dict:
        """Everything except wall time, for determinism comparisons."""
        d = asdict(self)
        d.pop("wall_time_s")
        return d


def audit_trainable(table: TagTable, heads: dict[str, TaskHead], plan: StagePlan) -> dict[str, int]:
    """Exact trainable parameter counts: p*d per tag, d*d_t per head."""
    audit: dict[str, int] = {}
    for name in plan.trainable_tags:
        audit[f"tag:{name}"] = table.get(name).param_count
    for name in plan.trainable_heads:
        audit[f"head:{name}"] = heads[name].param_count
    return audit


def next_token_targets(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Shifted targets with tag ids zeroed; masks never select those positions."""
    tgt = np.roll(ids, -1)
    return np.where(tgt < vocab_size, tgt, 0)


def example_loss(
    backbone: Backbone,
    table: TagTable,
    ex: RenderedExample,
    head: TaskHead | None,
    lambda_f: float,
    lambda_m: float,
) -> Tensor:
    """lambda_f * l_F + lambda_m * l_M for one rendered example."""
    x = backbone.embed(ex.ids, table)
    logits, hidden = backbone.forward(x)
    targets = next_token_targets(ex.ids, backbone.config.vocab_size)
    loss: Tensor | None = None
    if lambda_f > 0.0:
        if head is not None and head.weight is not None:
            pred = nm.matmul(nm.gather_rows(hidden, [ex.readout_index]), head.weight)
            y = standardize(head, float(ex.target_value[0]))
            tgt = Tensor(np.full((1, head.d_t), y, dtype=pred.data.dtype))
            l_f = nm.mse(pred, tgt)
        else:
            l_f = nm.cross_entropy(logits, targets, ex.target_mask)
        loss = nm.scale(l_f, lambda_f)
    if lambda_m > 0.0:
        l_m = nm.cross_entropy(logits, targets, ex.lm_mask)
        l_m = nm.scale(l_m, lambda_m)
        loss = l_m if loss is None else nm.add(loss, l_m)
    if loss is None:
        raise PlanError("both loss weights are zero")
    return loss


def _check_lm_defined(task: TaskData, plan: StagePlan) -> None:
    if plan.lambda_m <= 0.0:
        return
    payload_fields = [s.fld for s in task.template.segments if s.kind == "payload"]
    if not any(f in task.template.lm_scope for f in payload_fields):
        raise PlanError(
            f"task {task.name!r}: lambda_m > 0 but the template has no payload "
            "positions in lm_scope, so l_M is undefined"
        )


def _collect_trainable(
    backbone: Backbone, table: TagTable, heads: dict[str, TaskHead], plan: StagePlan
) -> dict[str, Tensor]:
    backbone.set_trainable(False)
    for name in table.names():
        table.get(name).embedding.requires_grad = False
    for h in heads.values():
        if h.weight is not None:
            h.weight.requires_grad = False
    params: dict[str, Tensor] = {}
    for name in plan.trainable_tags:
        spec = table.get(name)
        if spec.status == "frozen":
            raise PlanError(f"tag {name!r} is frozen but listed as trainable")
        spec.embedding.requires_grad = True
        params[f"tag:{name}"] = spec.embedding
    for name in plan.trainable_heads:
        if name not in heads:
            raise PlanError(f"head {name!r} not provided")
        w = heads[name].weight
        if w is None:
            raise PlanError(f"head {name!r} has no trainable weight")
        w.requires_grad = True
        params[f"head:{name}"] = w
    if not params:
        raise PlanError("nothing to train")
    return params


def _microbatch_param_names(task: TaskData, plan: StagePlan) -> set[str]:
    """Trainable params that one microbatch of this task must route gradient to:
    trainable tags referenced by the template (alias-resolved) plus the task's
    head when it is in the trainable set."""
    referenced = set()
    for seg in task.template.segments:
        if seg.kind == "tag" and seg.name:
            referenced.add(task.tag_alias.get(seg.name, seg.name))
    expected = {f"tag:{n}" for n in plan.trainable_tags if n in referenced}
    if task.head_name and task.head_name in plan.trainable_heads:
        expected.add(f"head:{task.head_name}")
    return expected


def _routing_audit(
    backbone: Backbone,
    table: TagTable,
    heads: dict[str, TaskHead],
    params: dict[str, Tensor],
    expected: set[str],
) -> None:
    for name in expected:
        if params[name].grad is None:
            raise PlanError(f"gradient routing: trainable {name} received no gradient")
    for pname, p in backbone.parameters().items():
        if p.grad is not None:
            raise PlanError(f"gradient routing: frozen backbone param {pname} has a gradient")
    trained_tensors = {id(p) for p in params.values()}
    for name in table.names():
        emb = table.get(name).embedding
        if id(emb) not in trained_tensors and emb.grad is not None:
            raise PlanError(f"gradient routing: non-trainable tag {name} has a gradient")
    for hname, h in heads.items():
        if h.weight is not None and id(h.weight) not in trained_tensors and h.weight.grad is not None:
            raise PlanError(f"gradient routing: non-trainable head {hname} has a gradient")


def run_training(
    backbone: Backbone,
    table: TagTable,
    tasks: list[TaskData],
    heads: dict[str, TaskHead],
    plan: StagePlan,
    log_every: int = 10,
) -> TrainReport:
    """Shared engine: proportional task mixing over task-pure microbatches,
    gradient accumulation, cosine-scheduled AdamW over the routed set."""
    t0 = time.monotonic()
    hash_before = param_hash(backbone)
    for task in tasks:
        _check_lm_defined(task, plan)
        if not task.train:
            raise PlanError(f"task {task.name!r} has an empty training split")
    params = _collect_trainable(backbone, table, heads, plan)
    opt = AdamW(params, plan.beta1, plan.beta2, plan.eps, plan.weight_decay)
    rng = nm.make_rng(plan.seed)
    sizes = np.array([len(t.train) for t in tasks], dtype=np.float64)
    task_probs = sizes / sizes.sum()
    max_len = backbone.config.context_len

    step_log: list[dict] = []
    audited = False
    for step in range(plan.steps):
        step_losses = []
        for _ in range(plan.grad_accum):
            ti = int(rng.choice(len(tasks), p=task_probs))
            task = tasks[ti]
            head = heads.get(task.head_name) if task.head_name else None
            idx = rng.integers(0, len(task.train), size=plan.batch_size)
            total: Tensor | None = None
            for i in idx:
                ex = render(task.template, task.train[int(i)], table, task.tag_alias, max_len)
                loss = example_loss(backbone, table, ex, head, plan.lambda_f, plan.lambda_m)
                total = loss if total is None else nm.add(total, loss)
            total = nm.scale(total, 1.0 / plan.batch_size)
            nm.assert_finite(total, f"loss at step {step}")
            nm.backward(total)
            step_losses.append(total.item())
            if not audited:
                _routing_audit(backbone, table, heads, params, _microbatch_param_names(task, plan))
                audited = True
        lr = cosine_lr(step + 1, plan.steps, plan.warmup_fraction, plan.lr)
        opt.step(lr, grad_scale=1.0 / plan.grad_accum, allow_missing=len(tasks) > 1)
        for p in params.values():
            nm.assert_finite(p, "parameter after optimizer step")
        opt.zero_grad()
        if step % log_every == 0 or step == plan.steps - 1:
            step_log.append({"step": step, "loss": float(np.mean(step_losses)), "lr": lr})

    for p in params.values():
        p.requires_grad = False

    audit = audit_trainable(table, heads, plan)
    report = TrainReport(
        stage=plan.stage,
        seed=plan.seed,
        steps=step_log,
        final_metric={},
        audit=audit,
        total_trainable=sum(audit.values()),
        backbone_hash_before=hash_before,
        backbone_hash_after=param_hash(backbone),
        manifest=[t.name for t in tasks],
        wall_time_s=time.monotonic() - t0,
    )
    return report


# -----------------------------------------------------------------------------
# Stage wrappers
# -----------------------------------------------------------------------------


def _validate_stage1(table: TagTable, tag_name: str, plan: StagePlan) -> None:
    if plan.stage != 1:
        raise PlanError(f"stage-1 run with plan.stage={plan.stage}")
    if plan.lambda_f != 0.0:
        raise PlanError("stage 1: lambda_f must be 0")
    if plan.lambda_m <= 0.0:
        raise PlanError("stage 1: lambda_m must be positive")
    if plan.trainable_tags != (tag_name,) or plan.trainable_heads:
        raise PlanError("stage 1: trainable set must be exactly the one domain tag")
    if table.get(tag_name).kind != "domain":
        raise PlanError(f"stage 1 trains domain tags; {tag_name!r} is a function tag")


def train_stage1(
    backbone: Backbone,
    table: TagTable,
    tag_name: str,
    corpus: list[str],
    heldout: list[str],
    plan: StagePlan,
) -> TrainReport:
    """Self-supervised next-token training of one domain tag on raw in-domain
    strings rendered as [tag; text]."""
    _validate_stage1(table, tag_name, plan)
    template = stage1_template(tag_name)
    task = TaskData(
        name=f"stage1:{tag_name}",
        template=template,
        train=[{"text": s} for s in corpus],
        heldout=[{"text": s} for s in heldout],
    )
    report = run_training(backbone, table, [task], {}, plan)
    from .evalsuite import domain_perplexity

    report.final_metric = {
        "perplexity": domain_perplexity(backbone, table, tag_name, heldout)
    }
    return report


def _validate_stage2(
    table: TagTable, function_tag: str, plan: StagePlan
) -> None:
    if plan.stage != 2:
        raise PlanError(f"stage-2 run with plan.stage={plan.stage}")
    if table.get(function_tag).kind != "function":
        raise PlanError(f"stage 2 needs a function tag, got {function_tag!r}")
    domain_trainables = [
        n for n in plan.trainable_tags if n != function_tag and table.get(n).kind == "domain"
    ]
    fn_trainables = [n for n in plan.trainable_tags if table.get(n).kind == "function"]
    if fn_trainables != [function_tag]:
        raise PlanError("stage 2: exactly one function tag may train")
    if domain_trainables and plan.lambda_m <= 0.0:
        raise PlanError("stage 2: lambda_m must be positive while a domain tag trains")


def train_stage2(
    backbone: Backbone,
    table: TagTable,
    function_tag: str,
    head: TaskHead,
    task: TaskData,
    plan: StagePlan,
    enrich: tuple[str, ...] = (),
) -> TrainReport:
    """Single-task function-tag training; with enrich=(domain tags...), forked
    copies of those tags co-train under the combined l_F + l_M loss."""
    alias = dict(task.tag_alias)
    if enrich:
        forks = []
        for name in enrich:
            fork = enrich_fork(table.get(name), task.name, table)
            alias[name] = fork.name
            forks.append(fork.name)
        plan = StagePlan(**{**plan.to_json(), "trainable_tags": tuple(plan.trainable_tags) + tuple(forks)})
        task = TaskData(**{**task.__dict__, "tag_alias": alias})
    _validate_stage2(table, function_tag, plan)
    if head.kind == "regression":
        fit_standardizer(head, [r["label"] for r in task.train])
    heads = {head.name: head}
    report = run_training(backbone, table, [task], heads, plan)
    from .evalsuite import evaluate_task

    report.final_metric = {task.name: evaluate_task(backbone, table, task, head)}
    return report


def _validate_stage3(table: TagTable, function_tag: str, tasks: list[TaskData], plan: StagePlan) -> None:
    if plan.stage != 3:
        raise PlanError(f"stage-3 run with plan.stage={plan.stage}")
    if plan.lambda_m != 0.0:
        raise PlanError("stage 3: lambda_m must be 0 (domain tags are frozen)")
    for name in plan.trainable_tags:
        if table.get(name).kind == "domain":
            raise PlanError(f"stage 3: domain tag {name!r} must stay frozen")
    if plan.trainable_tags != (function_tag,):
        raise PlanError("stage 3: trainable tags must be exactly the function tag")
    if len(tasks) < 2:
        template = tasks[0].template
        domain_tags = set()
        for seg in template.segments:
            if seg.kind == "tag" and seg.name and seg.name in table.names():
                if table.get(seg.name).kind == "domain":
                    domain_tags.add(seg.name)
        if len(domain_tags) < 2:
            raise PlanError("stage 3 needs >=2 datasets or >=2 domains in one input")


def train_stage3(
    backbone: Backbone,
    table: TagTable,
    function_tag: str,
    heads: dict[str, TaskHead],
    tasks: list[TaskData],
    plan: StagePlan,
) -> TrainReport:
    """Multi-task function-tag training with proportional mixing; batches stay
    task-pure so each head only ever sees its own task's gradients."""
    _validate_stage3(table, function_tag, tasks, plan)
    for task in tasks:
        head = heads.get(task.head_name) if task.head_name else None
        if head is not None and head.kind == "regression":
            fit_standardizer(head, [r["label"] for r in task.train])
    report = run_training(backbone, table, tasks, heads, plan)
    from .evalsuite import evaluate_task

    report.final_metric = {
        task.name: evaluate_task(backbone, table, task, heads.get(task.head_name))
        for task in tasks
        if task.heldout
    }
    return report
