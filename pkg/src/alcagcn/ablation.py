"""The ablation grid: the full model and seven single-component variants, trained and scored alike."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .config import RunConfig
from .dataset import Dataset
from .fewshot import dataset_arrays, evaluate_oneshot, train
from .model import Model


@dataclass(frozen=True)
class Variant:
    name: str
    sampling_strategy: str = "both"
    division: str = "both"
    constraints: str = "full"


VARIANTS = (
    Variant("part_sampling_only", sampling_strategy="part_only"),
    Variant("skeleton_sampling_only", sampling_strategy="skeleton_only"),
    Variant("division_none", division="none"),
    Variant("division_spatial_only", division="spatial_only"),
    Variant("division_temporal_only", division="temporal_only"),
    Variant("no_adl", constraints="no_adl"),
    Variant("no_global", constraints="no_global"),
    Variant("full"),
)

CSV_COLUMNS = ("variant", "sampling_strategy", "division", "constraints", "seed", "config_hash",
               "accuracy", "best_val_accuracy", "epochs_run", "config")


def variant_config(cfg: RunConfig, v: Variant) -> RunConfig:
    return cfg.with_model(sampling_strategy=v.sampling_strategy, division=v.division, constraints=v.constraints)


def run_variant(cfg: RunConfig, v: Variant, ds: Dataset, arrays=None) -> dict:
    vcfg = variant_config(cfg, v)
    model = Model(vcfg.model_config(), seed=vcfg.seed)
    result = train(model, ds, vcfg.train_config(), arrays=arrays)
    report = evaluate_oneshot(model, ds, arrays=arrays)
    return {
        "variant": v.name,
        "sampling_strategy": v.sampling_strategy,
        "division": v.division,
        "constraints": v.constraints,
        "seed": vcfg.seed,
        "config_hash": vcfg.hash(),
        "accuracy": report.accuracy,
        "best_val_accuracy": result.best_val_accuracy,
        "epochs_run": len(result.metrics),
        "config": vcfg.to_json(),
    }


def run_ablation(cfg: RunConfig, ds: Dataset, variants=VARIANTS, on_row=None) -> list[dict]:
    arrays = dataset_arrays(ds, cfg.data.frames)
    rows = []
    for v in variants:
        row = run_variant(cfg, v, ds, arrays)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        row["accuracy"] = float(row["accuracy"])
        row["config"] = json.loads(row["config"])
    return rows
