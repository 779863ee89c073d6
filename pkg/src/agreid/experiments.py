"""Ablation harness: strategy arms, threshold strategies and encoder variants.

Arms follow the dual-guidance ablation grid:

* ``baseline``: holistic ``default`` template, no pseudo-label guidance
* ``at``: attribute template, ``beta = 0``
* ``ap``: ``default`` template, ``beta = 0.01``
* ``both``: attribute template, ``beta = 0.01``
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .pipeline import (AGReIDModel, ModelConfig, TrainConfig, extract_features,
                       train_stage1, train_stage2)
from .retrieval import evaluate
from .synthdata import Dataset, generate_dataset

log = logging.getLogger(__name__)

ATTRIBUTE_TEMPLATE = "attr_d"
DEFAULT_BETA = 0.01
ARMS: dict[str, tuple[str, float]] = {
    "baseline": ("default", 0.0),
    "at": (ATTRIBUTE_TEMPLATE, 0.0),
    "ap": ("default", DEFAULT_BETA),
    "both": (ATTRIBUTE_TEMPLATE, DEFAULT_BETA),
}


@dataclass(frozen=True)
class DataConfig:
    num_ids: int = 32
    images_per_id: int = 20
    num_cams: int = 2
    p_occ: float = 0.5
    area_range: tuple[float, float] = (0.2, 0.4)

    def build(self, seed: int) -> tuple[Dataset, Dataset]:
        kw = dict(num_ids=self.num_ids, images_per_id=self.images_per_id,
                  num_cams=self.num_cams, seed=seed, p_occ=self.p_occ, area_range=self.area_range)
        return generate_dataset(split="train", **kw), generate_dataset(split="test", **kw)


@dataclass(frozen=True)
class ArmSpec:
    name: str
    template: str
    beta: float
    gamma_strategy: str = "otsu"
    variant: str = "SE"


def arm_spec(name: str, gamma_strategy: str = "otsu", variant: str = "SE") -> ArmSpec:
    if name not in ARMS:
        raise KeyError(f"unknown arm {name!r}; choose from {sorted(ARMS)}")
    template, beta = ARMS[name]
    return ArmSpec(name, template, beta, gamma_strategy, variant)


@dataclass
class Stage1Cache:
    """Stage-1 states keyed by everything stage 1 depends on."""

    states: dict = field(default_factory=dict)

    def get_model(self, key, build):
        if key not in self.states:
            model, hist = build()
            self.states[key] = ({k: v.data.copy() for k, v in model.parameters().items()}, hist)
            return model, hist
        snapshot, hist = self.states[key]
        model = AGReIDModel(key[0], seed=key[1])
        for k, p in model.parameters().items():
            p.data = snapshot[k].copy()
        return model, hist


def run_arm(arm: ArmSpec, train: Dataset, test: Dataset, cfg: TrainConfig,
            seed: int = 0, cache: Stage1Cache | None = None,
            model_overrides: dict | None = None) -> dict[str, float]:
    """Train both stages for one arm and evaluate on the test split."""
    mcfg = ModelConfig(num_ids=train.num_ids, template=arm.template, variant=arm.variant,
                       **(model_overrides or {}))
    cfg = replace(cfg, beta=arm.beta, gamma_strategy=arm.gamma_strategy, seed=seed)

    def build():
        model = AGReIDModel(mcfg, seed=seed)
        return model, train_stage1(train, cfg, model)

    stage1_key = (mcfg, seed, cfg.stage1_epochs, cfg.stage1_lr, cfg.lam, cfg.tau, cfg.warmup_steps,
                  cfg.batch_size, cfg.instances_per_id, cfg.train_projections,
                  cfg.attr_loss_updates_v)
    cache = cache if cache is not None else Stage1Cache()
    model, h1 = cache.get_model(stage1_key, build)
    h2 = train_stage2(train, cfg, model)
    metrics = evaluate(extract_features(model, test), test.pids, test.camids)
    metrics.update({
        "stage1_final_align": float(h1.epoch_means("align")[-1]),
        "stage2_final_guide": float(h2.epoch_means("guide")[-1]),
    })
    log.info("arm=%s seed=%d gamma=%s variant=%s mAP=%.4f R1=%.4f", arm.name, seed,
             arm.gamma_strategy, arm.variant, metrics["mAP"], metrics["R1"])
    return metrics


def random_init_metrics(test: Dataset, num_ids: int, seed: int = 0) -> dict[str, float]:
    model = AGReIDModel(ModelConfig(num_ids=num_ids), seed=seed)
    return evaluate(extract_features(model, test), test.pids, test.camids)


def _run_job(job):
    arm, data_cfg, cfg, seed = job
    train, test = data_cfg.build(seed)
    return run_arm(arm, train, test, cfg, seed)


def worker_count() -> int:
    cpus = os.cpu_count() or 1
    env = os.environ.get("AGREID_THREADS")
    return max(1, min(int(env), cpus) if env else cpus)


def run_grid(arms: list[ArmSpec], seeds: list[int], cfg: TrainConfig,
             data_cfg: DataConfig = DataConfig(), workers: int | None = None
             ) -> dict[tuple[str, str, str, int], dict[str, float]]:
    """Every (arm, seed) pair. Results are keyed ``(name, gamma, variant, seed)``.

    With one worker, jobs sharing a seed reuse stage-1 states and datasets.
    """
    workers = worker_count() if workers is None else workers
    results = {}
    if workers <= 1:
        for seed in seeds:
            train, test = data_cfg.build(seed)
            cache = Stage1Cache()
            for arm in arms:
                results[(arm.name, arm.gamma_strategy, arm.variant, seed)] = run_arm(
                    arm, train, test, cfg, seed, cache)
        return results
    jobs = [(arm, data_cfg, cfg, seed) for seed in seeds for arm in arms]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        for job, res in zip(jobs, ex.map(_run_job, jobs)):
            arm, _, _, seed = job
            results[(arm.name, arm.gamma_strategy, arm.variant, seed)] = res
    return results


def mean_over_seeds(results, key: str = "mAP") -> dict[tuple[str, str, str], float]:
    groups: dict[tuple[str, str, str], list[float]] = {}
    for (name, gamma, variant, _seed), m in results.items():
        groups.setdefault((name, gamma, variant), []).append(m[key])
    return {k: float(np.mean(v)) for k, v in groups.items()}
