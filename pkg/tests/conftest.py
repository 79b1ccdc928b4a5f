"""Session fixtures for the acceptance suite: the reference pipeline runs
once and is shared by every criterion that needs trained artifacts."""

import pytest

from tagtune.backbone import load_backbone
from tagtune.pipeline import REFERENCE_BUDGETS, run_reference_pipeline
from tagtune.tags import load_tags


@pytest.fixture(scope="session")
def ref_pipeline(tmp_path_factory):
    """One full reference run at seed 0: (artifact dir, PipelineResult)."""
    out = tmp_path_factory.mktemp("reference") / "run0"
    result = run_reference_pipeline(out, seed=0, budgets=REFERENCE_BUDGETS)
    return out, result


@pytest.fixture(scope="session")
def ref_artifacts(ref_pipeline):
    """Backbone and tag table loaded back from the reference run."""
    out, _ = ref_pipeline
    backbone = load_backbone(out / "backbone")
    table = load_tags(out / "tags.json", out / "tags.bin", expect_d=backbone.config.embed_dim)
    return backbone, table


@pytest.fixture(scope="session")
def ablation_reports(ref_artifacts):
    """The criterion-8/9 grid: direction conditions across seeds {0,1,2},
    enrichment + digit-generation at seed 0, and the tag-length sweep."""
    from tagtune.domains import COMBINATION_TASK, build_task_datasets
    from tagtune.evalsuite import AblationSetting, run_ablation
    from tagtune.pipeline import REFERENCE_BUDGETS as B
    from tagtune.protocol import StagePlan, TaskData
    from tagtune.templates import builtin_templates

    backbone, table = ref_artifacts
    splits = build_task_datasets(
        COMBINATION_TASK, {"train": B.task_train, "test": B.task_test}, seed=13
    )
    setting = AblationSetting(
        task=TaskData(
            name="combo",
            template=builtin_templates()["pair_combination"],
            train=splits["train"],
            heldout=splits["test"],
            metric="mae",
            decode_precision=1,
        ),
        function_tag="combo",
        domain_tags=("mol",),
        metric="mae",
        plan=StagePlan(stage=2, lambda_f=1.0, lambda_m=0.0, steps=180, lr=0.01, seed=0),
        function_p=B.tag_p,
    )
    reports = run_ablation(
        backbone, table, setting, seeds=(0, 1, 2),
        conditions=("full", "no_domain_tags", "no_function_tag"), sweep=False,
    )
    reports += run_ablation(
        backbone, table, setting, seeds=(0,),
        conditions=("enriched", "no_reg_head"), sweep=True,
    )
    return reports
