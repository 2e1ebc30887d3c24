"""MAE/RMSE, tape-free inference, and comparison tables."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .graph import Graph, normalize_adjacency
from .models import GraphModel, PairBatch, PMFModel
from .sparse import SparseMatrix

REPORT_FORMAT = "gtnrec-report"
REPORT_VERSION = 1
REPORT_FIELDS = (
    "dataset",
    "model",
    "seed",
    "n",
    "mae",
    "rmse",
    "cold_pairs",
    "split_digest",
    "config_digest",
)


def _residuals(pred, targets) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise DimensionError(f"{p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ContractError("metrics need at least one prediction")
    return p - t


def mae(pred, targets) -> float:
    return float(np.mean(np.abs(_residuals(pred, targets))))


def rmse(pred, targets) -> float:
    r = _residuals(pred, targets)
    return float(np.sqrt(np.mean(r * r)))


def predict(
    model,
    g: Graph,
    pairs: np.ndarray,
    adj_norm: Optional[SparseMatrix] = None,
    clamp: bool = False,
) -> np.ndarray:
    """Predicted ratings for internal-id ``pairs``; must run outside any tape."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if isinstance(model, PMFModel):
        out = model.forward(PairBatch(pairs, np.zeros(len(pairs)))).data[:, 0]
    elif isinstance(model, GraphModel):
        adj = normalize_adjacency(g) if adj_norm is None else adj_norm
        out = model.score(model.node_embeddings(adj), pairs).data[:, 0]
    else:
        raise TypeError(f"cannot score with {type(model).__name__}")
    return np.clip(out, 1.0, 5.0) if clamp else out.copy()


@dataclass
class MetricsReport:
    dataset: str
    model: str
    n: int
    mae: float
    rmse: float
    seed: int
    config_digest: str = ""
    split_digest: str = ""
    cold_pairs: int = 0

    def to_dict(self) -> dict:
        d = {"format": REPORT_FORMAT, "version": REPORT_VERSION}
        d.update({k: asdict(self)[k] for k in REPORT_FIELDS})
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("format") != REPORT_FORMAT or obj.get("version") != REPORT_VERSION:
            raise FormatError(
                f"{path}: expected {REPORT_FORMAT} v{REPORT_VERSION}, "
                f"got {obj.get('format')} v{obj.get('version')}"
            )
        missing = [k for k in REPORT_FIELDS if k not in obj]
        if missing:
            raise FormatError(f"{path}: missing fields {missing}")
        return cls(**{k: obj[k] for k in REPORT_FIELDS})


def evaluate(
    model,
    g: Graph,
    batch: PairBatch,
    dataset: str = "",
    seed: int = 0,
    config_digest: str = "",
    split_digest: str = "",
    clamp: bool = False,
    adj_norm: Optional[SparseMatrix] = None,
) -> MetricsReport:
    """Score ``batch`` and assemble a report.

    Pairs touching nodes with no training edges are scored from their
    initial embeddings and counted in ``cold_pairs``.
    """
    pred = predict(model, g, batch.pairs, adj_norm=adj_norm, clamp=clamp)
    cold = g.is_cold(batch.pairs[:, 0]) | g.is_cold(batch.pairs[:, 1])
    return MetricsReport(
        dataset=dataset,
        model=model.kind,
        n=len(batch),
        mae=mae(pred, batch.targets),
        rmse=rmse(pred, batch.targets),
        seed=seed,
        config_digest=config_digest,
        split_digest=split_digest,
        cold_pairs=int(cold.sum()),
    )


def compare(reports: Sequence[MetricsReport]) -> list[dict]:
    """Per-run rows sorted by RMSE, then one mean row per (dataset, model) with several runs."""
    if not reports:
        raise ContractError("compare needs at least one report")
    rows = [{k: getattr(r, k) for k in REPORT_FIELDS} for r in reports]
    rows.sort(key=lambda r: (r["rmse"], r["dataset"], r["model"], str(r["seed"])))
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        groups[(r["dataset"], r["model"])].append(r)
    means = []
    for (dataset, model), members in sorted(groups.items()):
        if len(members) < 2:
            continue
        digests = {m["split_digest"] for m in members}
        means.append(
            {
                "dataset": dataset,
                "model": model,
                "seed": "mean",
                "n": int(round(np.mean([m["n"] for m in members]))),
                "mae": float(np.mean([m["mae"] for m in members])),
                "rmse": float(np.mean([m["rmse"] for m in members])),
                "cold_pairs": int(round(np.mean([m["cold_pairs"] for m in members]))),
                "split_digest": digests.pop() if len(digests) == 1 else "mixed",
                "config_digest": "",
            }
        )
    return rows + means


def write_comparison_csv(path, rows: Sequence[dict], digest: Optional[str] = None) -> None:
    """``%.6f`` metrics, ``\\n`` line endings; ``digest`` adds a trailing column."""
    tail = [] if digest is None else [digest]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REPORT_FIELDS) + ([] if digest is None else ["digest"]))
        for r in rows:
            w.writerow(
                [
                    r["dataset"],
                    r["model"],
                    r["seed"],
                    r["n"],
                    f"{r['mae']:.6f}",
                    f"{r['rmse']:.6f}",
                    r["cold_pairs"],
                    r["split_digest"],
                    r["config_digest"],
                ]
                + tail
            )
