"""Desk-scale experiment matrix behind the directional acceptance checks.

Headline segmentation results need real multi-site data and long GPU
training.  What a workstation CPU can check instead is direction: with a
tiny net on the synthetic registry, the full method should beat the plain
mean-teacher baseline on the held-out domain, mixed aggregated statistics
should hold up against either pure setting, and affine swapping should not
hurt.  Each configuration below runs for a few minutes; results are cached
in a JSON file keyed by a hash of the whole matrix definition, so repeated
invocations only compute what is missing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import TrainConfig
from .data import (
    DatasetRegistry,
    SyntheticDomainSpec,
    default_appearances,
    make_synthetic_registry,
)
from .trainer import TrainResult, train_loop

DESK_IMAGE_SIZE = 64
DESK_N_PER_DOMAIN = 200
DESK_K_DOMAINS = 4
DESK_UNSEEN_DOMAIN = 4
DESK_SEEDS = (0, 1, 2)
DESK_ITERATIONS = 600
DESK_WIDTHS = (8, 16, 32)
PSEUDO_QUALITY_ITERATION = 300


@dataclasses.dataclass(frozen=True)
class ExperimentSpec:
    """One named cell of the matrix: overrides applied to the desk config."""

    name: str
    overrides: dict


MATRIX: tuple[ExperimentSpec, ...] = (
    ExperimentSpec("baseline", {"use_branches": False, "lambda_h": 0.0, "lambda_r": 0.0}),
    ExperimentSpec("branches_only", {"lambda_h": 0.0, "lambda_r": 0.0}),
    ExperimentSpec("full", {"pseudo_quality_at": (PSEUDO_QUALITY_ITERATION,)}),
    ExperimentSpec("stats_batch", {"aggregated_statistics": "batch"}),
    ExperimentSpec("stats_instance", {"aggregated_statistics": "instance"}),
    ExperimentSpec("rand_off", {"p_rand": 0.0}),
    ExperimentSpec("rand_low", {"p_rand": 0.2}),
)


def desk_config(seed: int, **overrides) -> TrainConfig:
    base = dict(
        iterations=DESK_ITERATIONS,
        eval_every=DESK_ITERATIONS,
        widths=DESK_WIDTHS,
        unseen_domain=DESK_UNSEEN_DOMAIN,
        labeled_fraction=0.3,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_desk_registry() -> DatasetRegistry:
    spec = SyntheticDomainSpec(
        appearances=default_appearances(),
        image_size=DESK_IMAGE_SIZE,
        seed=0,
    )
    return make_synthetic_registry(
        spec, k_domains=DESK_K_DOMAINS, n_per_domain=DESK_N_PER_DOMAIN
    )


def matrix_hash() -> str:
    """Fingerprint of everything that defines the matrix's results.

    Covers the dataset constants, the shared config with the seed zeroed
    out, the per-cell overrides, and the seed list.  Changing any of them
    invalidates cached results; code changes do not, so delete the cache
    file after behavioral edits to the training path.
    """
    shared = dataclasses.asdict(desk_config(seed=0))
    definition = {
        "dataset": {
            "image_size": DESK_IMAGE_SIZE,
            "n_per_domain": DESK_N_PER_DOMAIN,
            "k_domains": DESK_K_DOMAINS,
        },
        "shared_config": shared,
        "matrix": [
            {"name": s.name, "overrides": {k: list(v) if isinstance(v, tuple) else v
                                           for k, v in s.overrides.items()}}
            for s in MATRIX
        ],
        "seeds": list(DESK_SEEDS),
    }
    blob = json.dumps(definition, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def summarize_run(result: TrainResult) -> dict:
    quality = {
        str(it): {
            mode: {str(d): v for d, v in scores.items()}
            for mode, scores in modes.items()
        }
        for it, modes in result.pseudo_quality.items()
    }
    return {
        "final_dice": result.final_unseen_dice,
        "unseen_domain": result.unseen_domain,
        "pseudo_quality": quality,
    }


def load_results(path: Path) -> dict:
    """Cached results if present and produced by the current matrix."""
    path = Path(path)
    if not path.exists():
        return {"matrix_hash": matrix_hash(), "runs": {}}
    payload = json.loads(path.read_text())
    if payload.get("matrix_hash") != matrix_hash():
        return {"matrix_hash": matrix_hash(), "runs": {}}
    return payload


def save_results(path: Path, results: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


def missing_cells(results: dict) -> list[tuple[ExperimentSpec, int]]:
    cells = []
    for spec in MATRIX:
        for seed in DESK_SEEDS:
            if str(seed) not in results["runs"].get(spec.name, {}):
                cells.append((spec, seed))
    return cells


def run_matrix(
    path: Path,
    progress: Optional[Callable[[str, int, dict], None]] = None,
    registry: Optional[DatasetRegistry] = None,
) -> dict:
    """Fill in every missing (configuration, seed) cell, saving as it goes.

    ``progress`` receives (configuration name, seed, per-iteration record)
    so callers can print a live view; the cache file is rewritten after
    each completed run, making interruption cheap.
    """
    results = load_results(path)
    todo = missing_cells(results)
    if not todo:
        return results
    if registry is None:
        registry = make_desk_registry()
    for spec, seed in todo:
        cfg = desk_config(seed=seed, **spec.overrides)
        callback = None
        if progress is not None:
            callback = lambda record, _n=spec.name, _s=seed: progress(_n, _s, record)
        result = train_loop(registry, cfg, progress=callback)
        results["runs"].setdefault(spec.name, {})[str(seed)] = summarize_run(result)
        save_results(path, results)
    return results


def seed_mean_dice(results: dict, name: str) -> float:
    runs = results["runs"][name]
    return float(np.mean([runs[str(s)]["final_dice"] for s in DESK_SEEDS]))


def seed_dice_values(results: dict, name: str) -> list[float]:
    return [results["runs"][name][str(s)]["final_dice"] for s in DESK_SEEDS]


def pseudo_quality_by_domain(
    results: dict, name: str = "full", iteration: int = PSEUDO_QUALITY_ITERATION
) -> dict[int, tuple[float, float]]:
    """Per training domain: seed-mean pseudo-label Dice, (per-domain, single-BN)."""
    per_domain: dict[int, tuple[list[float], list[float]]] = {}
    for seed in DESK_SEEDS:
        record = results["runs"][name][str(seed)]["pseudo_quality"][str(iteration)]
        for d, value in record["if_ensemble"].items():
            per_domain.setdefault(int(d), ([], []))[0].append(value)
        for d, value in record["single_bn"].items():
            per_domain.setdefault(int(d), ([], []))[1].append(value)
    return {
        d: (float(np.mean(vals[0])), float(np.mean(vals[1])))
        for d, vals in sorted(per_domain.items())
    }


def results_complete(results: dict) -> bool:
    return not missing_cells(results)


def summary_rows(results: dict) -> list[tuple[str, float, float]]:
    """(name, seed-mean Dice, half seed spread) per configuration, matrix order."""
    rows = []
    for spec in MATRIX:
        values = seed_dice_values(results, spec.name)
        rows.append(
            (spec.name, float(np.mean(values)), (max(values) - min(values)) / 2)
        )
    return rows
