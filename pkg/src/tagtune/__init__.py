"""Learnable domain/function tag embeddings appended to a frozen decoder-only
LM, trained with a three-stage protocol over synthetic domains with exact
label oracles, plus the matching evaluation and ablation harness."""

from .backbone import Backbone, BackboneConfig, load_backbone, param_hash, pretrain, save_backbone
from .domains import (
    affinity_oracle,
    build_task_datasets,
    cipher_translate_oracle,
    combination_oracle,
    descriptor_oracle,
    gen_corpus,
    gen_general_corpus,
    qed_oracle,
)
from .heads import TaskHead, greedy_decode, make_head, predict_numeric
from .numerics import AdamW, Tensor, backward, cosine_lr, make_rng
from .protocol import (
    StagePlan,
    TaskData,
    TrainReport,
    make_default_plan,
    train_stage1,
    train_stage2,
    train_stage3,
)
from .tags import TagSpec, TagTable, enrich_fork, init_tag, load_tags, save_tags, set_status
from .templates import RenderedExample, Template, builtin_templates, render, tokenize

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Backbone",
    "BackboneConfig",
    "RenderedExample",
    "StagePlan",
    "TagSpec",
    "TagTable",
    "TaskData",
    "TaskHead",
    "Template",
    "Tensor",
    "TrainReport",
    "affinity_oracle",
    "backward",
    "build_task_datasets",
    "builtin_templates",
    "cipher_translate_oracle",
    "combination_oracle",
    "cosine_lr",
    "descriptor_oracle",
    "enrich_fork",
    "gen_corpus",
    "gen_general_corpus",
    "greedy_decode",
    "init_tag",
    "load_backbone",
    "load_tags",
    "make_default_plan",
    "make_head",
    "make_rng",
    "param_hash",
    "predict_numeric",
    "pretrain",
    "qed_oracle",
    "render",
    "save_backbone",
    "save_tags",
    "set_status",
    "tokenize",
    "train_stage1",
    "train_stage2",
    "train_stage3",
]
