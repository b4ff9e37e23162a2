"""Ablation protocols: extractor-mode comparison and the expansion
coefficient sweep, each reported as mAP/mAP_O table rows."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import RunConfig
from .data import Sample
from .evaluate import EvalReport, evaluate_detections
from .training import run_inference, train_model

log = logging.getLogger(__name__)

ALPHA_GRID = (0.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 2.0, 2.0 / 3.0, 1.0)
EXTRACTOR_GRID = ("roimasking_ternary", "roimasking_binary", "roimasking_expanded",
                  "roialign", "roipool")


def _with(config: RunConfig, **over) -> RunConfig:
    cfg = dataclasses.replace(config)
    if "extractor" in over:
        cfg = dataclasses.replace(cfg, seg=dataclasses.replace(cfg.seg,
                                                               extractor=over["extractor"]))
    if "alpha" in over:
        cfg = dataclasses.replace(cfg, mask=dataclasses.replace(cfg.mask,
                                                                alpha=over["alpha"]))
    return cfg


def train_and_eval(config: RunConfig, train_set: Sequence[Sample],
                   test_set: Sequence[Sample], seed: int) -> EvalReport:
    model = train_model(train_set, config, seed=seed)
    detections = run_inference(model, test_set, config)
    return evaluate_detections(detections, test_set)


def _row(label: str, report: EvalReport) -> Dict:
    return {"label": label, **report.as_dict()}


def ablate_extractors(config: RunConfig, train_set, test_set,
                      extractors: Sequence[str] = EXTRACTOR_GRID,
                      seed: int = 0) -> List[Dict]:
    rows = []
    for extractor in extractors:
        log.info("ablate: extractor %s", extractor)
        report = train_and_eval(_with(config, extractor=extractor),
                                train_set, test_set, seed)
        rows.append(_row(extractor, report))
    return rows


def ablate_alpha(config: RunConfig, train_set, test_set,
                 alphas: Sequence[float] = ALPHA_GRID, seed: int = 0) -> List[Dict]:
    rows = []
    for alpha in alphas:
        log.info("ablate: alpha %.4f", alpha)
        report = train_and_eval(_with(config, alpha=alpha), train_set, test_set, seed)
        rows.append(_row(f"alpha={alpha:.4f}", report))
    return rows


def rows_monotone_ok(rows: Sequence[Dict]) -> bool:
    """Stricter-threshold AP must never exceed the looser one, per row."""
    for row in rows:
        for loose, strict in (("mAP@0.5", "mAP@0.7"), ("mAP_O@0.5", "mAP_O@0.7")):
            lo, st = row.get(loose), row.get(strict)
            if lo is not None and st is not None and st > lo + 1e-9:
                return False
    return True


def rows_table(rows: Sequence[Dict]) -> str:
    cols = ["label", "mAP@0.5", "mAP@0.7", "mAP_O@0.5", "mAP_O@0.7"]
    lines = ["  ".join(f"{c:<22}" if c == "label" else f"{c:>9}" for c in cols)]
    for row in rows:
        cells = [f"{row['label']:<22}"]
        for c in cols[1:]:
            v = row.get(c)
            cells.append(f"{'-':>9}" if v is None else f"{v:>9.4f}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def rows_write(rows: Sequence[Dict], out_dir, stem: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"rows": list(rows), "monotone_ok": rows_monotone_ok(rows)}
    with open(out_dir / f"{stem}.json", "w") as f:
        json.dump(payload, f, indent=2)
    (out_dir / f"{stem}.txt").write_text(rows_table(rows) + "\n")
