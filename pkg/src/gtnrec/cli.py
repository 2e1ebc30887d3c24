"""Command line: ``gtnrec {ingest,train,evaluate,gridsearch,compare}``.

Runs are driven by one JSON config file whose keys are the
:class:`~gtnrec.training.TrainConfig` fields plus

* ``data``: directory written by ``gtnrec ingest`` (relative to the config file),
* ``dataset``: label copied into reports (defaults to the ingest label),
* ``grid``: ``{field: [values]}`` ranges for ``gridsearch``,
* ``out``: output directory, used when ``--out`` is not given.

Flags override the file.  Every command writes a ``manifest.json`` holding a
:class:`RunManifest`; its digest covers the command, the resolved config and
the content of every input file, and every artifact carries that digest.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .errors import FormatError, GtnrecError
from .evaluation import MetricsReport, compare, evaluate, write_comparison_csv
from .graph import (
    SplitSet,
    build_train_graph,
    dataset_stats,
    load_ratings,
    load_trust,
    split,
    subsample_users,
    write_ratings,
    write_trust,
)
from .models import PairBatch
from .training import TrainConfig, grid_search, make_model, train

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
MANIFEST_FORMAT = "gtnrec-run"
CONFIG_EXTRAS = ("data", "dataset", "grid", "out")
SEED_MAX = 2**64 - 1


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str
    config: dict
    dataset_paths: dict
    seed: int
    input_digests: dict = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0

    @property
    def digest(self) -> str:
        """Content hash of command, config and inputs; paths and timestamps are left out."""
        payload = {"command": self.command, "config": self.config, "inputs": self.input_digests}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, out_dir) -> None:
        d = {"format": MANIFEST_FORMAT, **dataclasses.asdict(self), "digest": self.digest}
        (Path(out_dir) / MANIFEST_FILE).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_FILE
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise FormatError(f"{path}: cannot read run manifest ({exc})") from exc
        if obj.get("format") != MANIFEST_FORMAT:
            raise FormatError(f"{path}: not a {MANIFEST_FORMAT} manifest")
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _seed(raw: str) -> int:
    value = int(raw)
    if not 0 <= value <= SEED_MAX:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {raw}")
    return value


# -- config resolution -----------------------------------------------------------


@dataclass
class ResolvedConfig:
    path: Path
    train: TrainConfig
    data: Optional[Path]
    dataset: str
    grid: dict
    out: Path


def resolve_config(path, seed=None, model=None, out=None) -> ResolvedConfig:
    """Read the JSON config and apply flag overrides (flags win)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    extras = {k: raw.pop(k) for k in CONFIG_EXTRAS if k in raw}
    if seed is not None:
        raw["seed"] = seed
    if model is not None:
        raw["model"] = model
    cfg = TrainConfig.from_dict(raw)
    base = path.parent
    data = base / extras["data"] if "data" in extras else None
    out_dir = out if out is not None else (base / extras["out"] if "out" in extras else None)
    if out_dir is None:
        raise GtnrecError("no output directory: pass --out or set 'out' in the config")
    return ResolvedConfig(path, cfg, data, extras.get("dataset", ""), extras.get("grid", {}), Path(out_dir))


@dataclass
class IngestedData:
    ratings: list
    trust: list
    splits: SplitSet
    manifest: RunManifest
    splits_path: Path


def load_ingested(data_dir) -> IngestedData:
    """Reload what ``ingest`` wrote, refusing inputs that changed since."""
    if data_dir is None:
        raise GtnrecError("config has no 'data' entry pointing at an ingest directory")
    data_dir = Path(data_dir)
    man = RunManifest.load(data_dir)
    for name in ("ratings", "trust"):
        p = Path(man.dataset_paths[name])
        if file_digest(p) != man.input_digests[f"{name}_used"]:
            raise FormatError(f"{p} changed since ingest; run 'gtnrec ingest' again")
    ratings = load_ratings(man.dataset_paths["ratings"])
    trust = load_trust(man.dataset_paths["trust"])
    splits_path = data_dir / "splits.json"
    splits = SplitSet.load(splits_path)
    return IngestedData(ratings, trust, splits, man, splits_path)


# -- commands ---------------------------------------------------------------------


def format_stats(stats: dict) -> str:
    rows = [
        ("users", f"{stats['users']}"),
        ("items", f"{stats['items']}"),
        ("ratings", f"{stats['ratings']}"),
        ("rating density", f"{100 * stats['rating_density']:.4f}%"),
        ("connections", f"{stats['connections']}"),
        ("social density", f"{100 * stats['social_density']:.4f}%"),
        ("mean rating", f"{stats['mean_rating']:.2f}"),
    ]
    return "\n".join(f"{k:<16}{v:>12}" for k, v in rows)


def cmd_ingest(ratings_path, trust_path, out_dir, seed: int = 0, subsample: float = 1.0, dataset: str = "") -> RunManifest:
    """Parse, optionally subsample users, split, and write ``splits.json`` + ``stats.json``."""
    if not 0 < subsample <= 1:
        raise GtnrecError(f"--subsample must lie in (0, 1], got {subsample}")
    started = time.time()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ratings = load_ratings(ratings_path)
    trust = load_trust(trust_path)
    used = {"ratings": str(Path(ratings_path).resolve()), "trust": str(Path(trust_path).resolve())}
    if subsample < 1:
        ratings, trust = subsample_users(ratings, trust, subsample, seed)
        used = {"ratings": str((out_dir / "ratings.csv").resolve()), "trust": str((out_dir / "trust.csv").resolve())}
        write_ratings(used["ratings"], ratings)
        write_trust(used["trust"], trust)
    splits = split(ratings, seed)
    man = RunManifest(
        command="ingest",
        config_path="",
        config={"seed": seed, "subsample": subsample, "dataset": dataset},
        dataset_paths=used,
        seed=seed,
        input_digests={
            "ratings": file_digest(ratings_path),
            "trust": file_digest(trust_path),
            "ratings_used": file_digest(used["ratings"]),
            "trust_used": file_digest(used["trust"]),
        },
        started=started,
    )
    stats = dataset_stats(ratings, trust)
    digest = man.digest
    _write_json(out_dir / "splits.json", {**splits.to_dict(), "run_digest": digest})
    _write_json(out_dir / "stats.json", {**stats, "split_digest": splits.digest(), "dataset": dataset, "run_digest": digest})
    man.finished = time.time()
    man.save(out_dir)
    print(format_stats(stats))
    return man


def _run_manifest(command: str, rc: ResolvedConfig, data: Optional[IngestedData], extra_inputs: dict | None = None) -> RunManifest:
    config = {"train": rc.train.to_dict(), "grid": rc.grid, "dataset": rc.dataset}
    inputs = dict(extra_inputs or {})
    paths = {}
    if data is not None:
        inputs.update(
            ratings=data.manifest.input_digests["ratings_used"],
            trust=data.manifest.input_digests["trust_used"],
            splits=file_digest(data.splits_path),
        )
        paths = {**data.manifest.dataset_paths, "splits": str(data.splits_path.resolve())}
    return RunManifest(command, str(rc.path.resolve()), config, paths, rc.train.seed, inputs, started=time.time())


def _dataset_label(rc: ResolvedConfig, data: IngestedData) -> str:
    return rc.dataset or data.manifest.config.get("dataset", "")


def cmd_train(rc: ResolvedConfig) -> RunManifest:
    """Train ``rc.train.model`` and write checkpoint, ``history.csv``, ``timing.csv``, manifest."""
    data = load_ingested(rc.data)
    man = _run_manifest("train", rc, data)
    digest = man.digest
    rc.out.mkdir(parents=True, exist_ok=True)
    cfg = rc.train
    g = build_train_graph(data.ratings, data.trust, data.splits, cfg.hidden_dim, cfg.seed)
    targets = np.array([data.ratings[i].rating for i in data.splits.train])
    model = make_model(cfg, g, targets)
    extra = {"run": MANIFEST_FILE, "dataset": _dataset_label(rc, data)}
    _, history = train(model, g, data.ratings, data.splits, cfg, out_dir=rc.out, digest=digest, manifest_extra=extra)
    history.write_csv(rc.out / "history.csv", digest)
    history.write_timing(rc.out / "timing.csv", digest)
    man.finished = time.time()
    man.save(rc.out)
    print(f"best val rmse {history.best_val_rmse:.6f} at epoch {history.best_epoch} (digest {digest})")
    return man


def cmd_evaluate(ckpt_dir, split_name: str = "test", out_dir=None, clamp: bool = False) -> MetricsReport:
    """Score a trained checkpoint on one split and write ``report.json``."""
    ckpt_dir = Path(ckpt_dir)
    out_dir = Path(out_dir) if out_dir is not None else ckpt_dir
    train_man = RunManifest.load(ckpt_dir)
    model, model_man = load_checkpoint(ckpt_dir)
    if model_man.get("digest") != train_man.digest:
        raise FormatError(f"{ckpt_dir}: checkpoint digest does not match {MANIFEST_FILE}")
    data = load_ingested(Path(train_man.dataset_paths["splits"]).parent)
    if file_digest(data.splits_path) != train_man.input_digests["splits"]:
        raise FormatError(f"{data.splits_path} changed since training")
    cfg = TrainConfig.from_dict(train_man.config["train"])
    g = build_train_graph(data.ratings, data.trust, data.splits, cfg.hidden_dim, cfg.seed)
    if (g.n_users, g.n_items) != (model.n_users, model.n_items):
        raise FormatError(f"graph has {g.n_users}x{g.n_items} nodes, checkpoint expects {model.n_users}x{model.n_items}")
    indices = getattr(data.splits, split_name)
    batch = PairBatch(*g.pairs([data.ratings[i] for i in indices]))
    man = RunManifest(
        command="evaluate",
        config_path="",
        config={"split": split_name, "clamp": clamp, "train_digest": train_man.digest},
        dataset_paths=train_man.dataset_paths,
        seed=cfg.seed,
        input_digests={"checkpoint": file_digest(ckpt_dir / "ckpt_best.npz"), **train_man.input_digests},
        started=time.time(),
    )
    report = evaluate(
        model,
        g,
        batch,
        dataset=model_man.get("dataset", ""),
        seed=cfg.seed,
        config_digest=man.digest,
        split_digest=data.splits.digest(),
        clamp=clamp,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "report.json")
    man.finished = time.time()
    if out_dir != ckpt_dir:
        man.save(out_dir)
    else:
        _write_json(out_dir / "evaluate.json", {"format": MANIFEST_FORMAT, **dataclasses.asdict(man), "digest": man.digest})
    print(f"{report.model} {split_name}: mae {report.mae:.6f} rmse {report.rmse:.6f} (n={report.n}, cold={report.cold_pairs})")
    return report


def cmd_gridsearch(rc: ResolvedConfig):
    """Train every combination of ``rc.grid`` and write ``gridsearch.csv`` + ``best_config.json``."""
    if not rc.grid:
        raise GtnrecError("gridsearch needs a non-empty 'grid' object in the config")
    data = load_ingested(rc.data)
    man = _run_manifest("gridsearch", rc, data)
    digest = man.digest
    rc.out.mkdir(parents=True, exist_ok=True)
    g = build_train_graph(data.ratings, data.trust, data.splits, rc.train.hidden_dim, rc.train.seed)
    result = grid_search(g, data.ratings, data.splits, rc.grid, base=rc.train)
    result.write_csv(rc.out / "gridsearch.csv", digest)
    _write_json(rc.out / "best_config.json", {"config": result.best.to_dict(), "best_val_rmse": result.best_rmse, "digest": digest})
    man.finished = time.time()
    man.save(rc.out)
    picked = {k: getattr(result.best, k) for k in sorted(rc.grid)}
    print(f"best {picked} val rmse {result.best_rmse:.6f}")
    return result


def cmd_compare(report_paths: Sequence, out_dir, force: bool = False) -> list[dict]:
    """Merge reports into ``comparison.csv``; mixed split digests need ``force``."""
    reports = [MetricsReport.load(p) for p in report_paths]
    splits = sorted({r.split_digest for r in reports})
    if len(splits) > 1 and not force:
        raise FormatError(f"reports come from different splits {splits}; pass --force to merge anyway")
    man = RunManifest(
        command="compare",
        config_path="",
        config={"force": force},
        dataset_paths={},
        seed=0,
        input_digests={f"report{i}": file_digest(p) for i, p in enumerate(report_paths)},
        started=time.time(),
    )
    rows = compare(reports)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(out_dir / "comparison.csv", rows, digest=man.digest)
    man.finished = time.time()
    man.save(out_dir)
    for r in rows:
        print(f"{r['dataset']:<10}{r['model']:<5}{str(r['seed']):>6}  mae {r['mae']:.6f}  rmse {r['rmse']:.6f}")
    return rows


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gtnrec", description="Graph transformer rating prediction.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse rating/trust CSVs and write the split")
    p.add_argument("ratings", type=Path)
    p.add_argument("trust", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--subsample", type=float, default=1.0, help="keep this fraction of users")
    p.add_argument("--dataset", default="", help="label carried into reports")

    for name, text in (("train", "train one model"), ("gridsearch", "train every grid combination")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--seed", type=_seed)
        p.add_argument("--model", choices=("gtn", "gcn", "pmf"))
        p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("checkpoint", type=Path, help="directory written by 'gtnrec train'")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", type=Path, help="defaults to the checkpoint directory")
    p.add_argument("--clamp", action="store_true", help="clip predictions to [1, 5]")

    p = sub.add_parser("compare", help="merge report.json files into comparison.csv")
    p.add_argument("reports", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="merge reports from different splits")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest":
            cmd_ingest(args.ratings, args.trust, args.out, seed=args.seed, subsample=args.subsample, dataset=args.dataset)
        elif args.command == "train":
            cmd_train(resolve_config(args.config, args.seed, args.model, args.out))
        elif args.command == "gridsearch":
            cmd_gridsearch(resolve_config(args.config, args.seed, args.model, args.out))
        elif args.command == "evaluate":
            cmd_evaluate(args.checkpoint, args.split, args.out, args.clamp)
        else:
            cmd_compare(args.reports, args.out, force=args.force)
    except (GtnrecError, ValueError, OSError, KeyError) as exc:
        print(f"gtnrec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
