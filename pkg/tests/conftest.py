"""Shared fixtures.

The expensive artifacts (corpus, oracle, clean base model, two poisoned
models) are built once per session at the shipped default scale and shared by
the unit and acceptance suites. Wall-clock times are recorded so acceptance
can assert its compute budgets.
"""

import time

import pytest

from deskdiff import diffusion
from deskdiff import eval as eval_mod
from deskdiff.config import gauss2d_config, shapes16_config
from deskdiff.data import ConceptSpec, build_attack_set, make_corpus
from deskdiff.personalize import AttackSpec, inject_backdoor

ACCEPT_SEED = 0


@pytest.fixture(scope="session")
def timings():
    return {}


@pytest.fixture(scope="session")
def cfg0():
    return shapes16_config(seed=ACCEPT_SEED)


@pytest.fixture(scope="session")
def corpus0(cfg0, timings):
    t0 = time.perf_counter()
    corpus = make_corpus(cfg0.categories, cfg0.corpus_per_category, cfg0.templates, cfg0.seed)
    timings["corpus"] = time.perf_counter() - t0
    return corpus


@pytest.fixture(scope="session")
def oracle0(cfg0, corpus0, timings):
    t0 = time.perf_counter()
    oracle = eval_mod.train_oracle(corpus0, cfg0.categories, cfg0.eval, cfg0.seed)
    timings["oracle"] = time.perf_counter() - t0
    return oracle


@pytest.fixture(scope="session")
def clean0(cfg0, corpus0, oracle0, timings):
    t0 = time.perf_counter()
    bundle = diffusion.train_base(corpus0, cfg0, oracle=oracle0)
    timings["train_base"] = time.perf_counter() - t0
    return bundle


@pytest.fixture(scope="session")
def ti_attack0(cfg0, clean0, timings):
    """Embedding-route attack: "[V] dog" bound to a specific can, k=6."""
    concept = build_attack_set(
        "[V] dog",
        ConceptSpec("can", instance_id="target-can-7"),
        k_mismatch=6,
        categories=cfg0.categories,
        template=cfg0.templates[0],
        seed=cfg0.seed,
        total=6,
    )
    spec = AttackSpec(
        method="nouveau",
        identifier="[V] dog",
        concept=concept,
        hyper=cfg0.ti,
        seed=cfg0.seed,
        template=cfg0.templates[0],
        categories=cfg0.categories,
    )
    t0 = time.perf_counter()
    bundle, report = inject_backdoor(clean0, spec)
    timings["ti_attack"] = time.perf_counter() - t0
    return bundle, report


@pytest.fixture(scope="session")
def db_attack0(cfg0, clean0, timings):
    """Denoiser-route attack: "[V] car" bound to a specific dog, k=6."""
    concept = build_attack_set(
        "[V] car",
        ConceptSpec("dog", instance_id="target-dog-3"),
        k_mismatch=6,
        categories=cfg0.categories,
        template=cfg0.templates[0],
        seed=cfg0.seed,
        total=6,
    )
    spec = AttackSpec(
        method="legacy",
        identifier="[V] car",
        concept=concept,
        hyper=cfg0.db,
        seed=cfg0.seed,
        template=cfg0.templates[0],
        categories=cfg0.categories,
    )
    t0 = time.perf_counter()
    bundle, report = inject_backdoor(clean0, spec)
    timings["db_attack"] = time.perf_counter() - t0
    return bundle, report


def tiny_gauss_config(seed: int = 11, steps: int = 250):
    cfg = gauss2d_config(seed=seed)
    cfg.base_train.steps = steps
    return cfg


@pytest.fixture()
def micro_bundle():
    """Untrained gauss2d bundle: cheap carrier for contract tests."""
    return diffusion.init_bundle(tiny_gauss_config())
