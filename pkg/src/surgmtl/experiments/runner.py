"""End-to-end runs, standalone evaluation and the regime x protocol grid."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import platform
import shutil
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import __version__
from ..metrics import METRIC_NAMES, MetricsReport
from ..models import MtlModel, PreparedFrame, load_checkpoint, prepare_frames, save_checkpoint
from ..synthdata import SceneDataset, generate_dataset, load_dataset, save_dataset, split_domains, train_val_split
from ..trainers import REGIMES, BestTracker, Snapshot, TaskData, Trainer, evaluate_model, train_teachers
from .config import PROTOCOLS, ExperimentConfig, config_hash, load_config, serialize, with_overrides
from .persistence import JsonlLogger, RunLock, atomic_write_json, atomic_write_text, read_json

log = logging.getLogger(__name__)

SELECTIONS = ("BG", "BC")
SPLITS = ("SD", "TD")
MANIFEST = "manifest.json"


@dataclass
class Splits:
    sd_train: SceneDataset
    sd_val: SceneDataset
    td_train: SceneDataset
    td_val: SceneDataset

    def items(self):
        return {"sd_train": self.sd_train, "sd_val": self.sd_val,
                "td_train": self.td_train, "td_val": self.td_val}.items()


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seed: int
    platform: dict
    regime: str
    protocol: str
    phase_log: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)  # split -> selection -> MetricsReport dict
    checkpoints: dict = field(default_factory=dict)
    status: str = "running"
    error: Optional[str] = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def report(self, split: str, selection: str) -> MetricsReport:
        return MetricsReport(**self.reports[split][selection])


# ---------------------------------------------------------------------------
# provenance


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def platform_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "system": platform.system(),
        "machine": platform.machine(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "threads": torch.get_num_threads(),
    }


# ---------------------------------------------------------------------------
# data


def build_splits(cfg: ExperimentConfig) -> Splits:
    ds = generate_dataset(cfg.dataset.generator, cfg.dataset.generator_seed)
    sd, td = split_domains(ds, cfg.dataset.shift, cfg.dataset.generator_seed)
    sd_train, sd_val = train_val_split(sd, cfg.eval.val_fraction, cfg.dataset.generator_seed)
    return Splits(sd_train, sd_val, td.train_split(), td.eval_split())


def write_splits(splits: Splits, out: str | Path) -> dict:
    return {name: str(save_dataset(ds, Path(out) / name)) for name, ds in splits.items()}


# ---------------------------------------------------------------------------
# run


def _checkpoint_saver(cfg: ExperimentConfig, out: Path, manifest: RunManifest, stage: str):
    ckpt_dir = out / "checkpoints"
    latest: dict[str, Path] = {}

    def on_best(kind: str, snap: Snapshot, model: MtlModel) -> None:
        name = f"{cfg.regime.name}-{kind.lower()}-{snap.epoch}"
        path = save_checkpoint(model, ckpt_dir / name, selection=kind, metric=snap.value,
                               phase=snap.phase, epoch=snap.epoch, stage=stage)
        # Only the current best per selection stays on disk.
        old = latest.get(kind)
        if old is not None and old != path:
            shutil.rmtree(old, ignore_errors=True)
        latest[kind] = path
        manifest.checkpoints[f"{stage}/{kind}"] = str(path)

    return on_best


def run(config: ExperimentConfig | str | Path, profile: str = "desk") -> RunManifest:
    """Pretrain, train the configured regime, optionally adapt, and evaluate BG/BC on SD and TD."""
    cfg = load_config(config, profile) if isinstance(config, (str, Path)) else config
    cfg.validate()
    out = Path(cfg.output_dir)
    manifest = RunManifest(config_hash(cfg), code_version(), cfg.seed, platform_fingerprint(),
                           cfg.regime.name, cfg.regime.protocol)
    with RunLock(out):
        atomic_write_text(out / "config.txt", serialize(cfg))
        (out / "metrics.jsonl").unlink(missing_ok=True)
        try:
            with JsonlLogger(out / "metrics.jsonl") as recorder:
                _execute(cfg, out, manifest, recorder)
            manifest.status = "success"
        except Exception as exc:
            manifest.status = "failed"
            manifest.error = f"{type(exc).__name__}: {exc}"
            manifest.notes["traceback"] = traceback.format_exc()
            atomic_write_json(out / MANIFEST, manifest.to_dict())
            raise
        atomic_write_json(out / MANIFEST, manifest.to_dict())
    return manifest


def _execute(cfg: ExperimentConfig, out: Path, manifest: RunManifest, recorder) -> None:
    t0 = time.perf_counter()
    rc = cfg.regime_config()
    splits = build_splits(cfg)
    crop = cfg.model.crop_size
    frames = {name: prepare_frames(ds, crop) for name, ds in splits.items()}
    sd = TaskData(frames["sd_train"], frames["sd_val"], "SD")
    td = TaskData(frames["td_train"], frames["td_val"], "TD")
    manifest.notes["split_sizes"] = {name: len(ds) for name, ds in splits.items()}

    model = MtlModel(cfg.model_config())
    tracker = BestTracker(_checkpoint_saver(cfg, out, manifest, "SD"))
    trainer = Trainer(model, rc, recorder=recorder, tracker=tracker)
    trainer.pretrain_cicl(sd.train)
    few = cfg.regime.protocol == "FEW"
    if few:
        n_novel = len(cfg.dataset.generator.novel_class_ids)
        trainer.pretrain_incremental(td.train, n_novel)

    teachers = None
    if cfg.regime.name in ("MTL_KD", "MTL_KD_FT"):
        teachers = train_teachers(model, sd, rc)
        manifest.notes["teachers"] = "caption-only and graph-only models from the pretrained weights"

    trainer.run_regime(sd, teachers)
    selected = dict(tracker.best)
    if few:
        trainer.tracker = BestTracker(_checkpoint_saver(cfg, out, manifest, "TD"))
        trainer.adapt(td, teachers)
        selected = dict(trainer.tracker.best)

    history = trainer.finish()
    manifest.phase_log = list(history.phases)
    manifest.notes["epochs_per_phase"] = {p: len(history.phase_rows(p)) for p in dict.fromkeys(history.phases)}
    manifest.notes["selection_split"] = "TD" if few else "SD"
    reports: dict = {s: {} for s in SPLITS}
    for kind in SELECTIONS:
        snap = selected.get(kind)
        if snap is None:
            raise RuntimeError(f"no {kind} checkpoint was selected")
        best_model = snap.restore(trainer.dtype)
        for split, data in (("SD", sd), ("TD", td)):
            reports[split][kind] = evaluate_model(best_model, data.val, split, cfg.eval.threshold).to_dict()
        manifest.notes.setdefault("selected_epochs", {})[kind] = snap.epoch
    manifest.reports = reports
    manifest.notes["train_curves"] = {
        p: [r["train_loss"] for r in history.epochs if r["phase"] == p] for p in dict.fromkeys(history.phases)}
    manifest.notes["wallclock"] = time.perf_counter() - t0


def load_manifest(path: str | Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    return RunManifest.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(checkpoint_path: str | Path, dataset_path: str | Path, threshold: float = 0.5) -> MetricsReport:
    """Score a saved checkpoint on every frame of a saved dataset; the split tag is the dataset's domain."""
    model, _ = load_checkpoint(checkpoint_path)
    ds = load_dataset(dataset_path)
    dtype = next(model.parameters()).dtype
    frames = prepare_frames(ds, model.config.crop_size, dtype)
    return evaluate_model(model, frames, ds.domain, threshold)


# ---------------------------------------------------------------------------
# grid


def grid_name(regime: str, protocol: str) -> str:
    return f"{regime.lower()}-{protocol.lower()}"


def write_grid_configs(base: ExperimentConfig, config_dir: str | Path) -> list[Path]:
    """One config file per regime x protocol, each with its own output directory."""
    config_dir = Path(config_dir).resolve()
    paths = []
    for regime in REGIMES:
        for protocol in PROTOCOLS:
            name = grid_name(regime, protocol)
            cfg = with_overrides(base, **{"regime.name": regime, "regime.protocol": protocol,
                                          "output_dir": str(config_dir / "runs" / name)})
            paths.append(atomic_write_text(config_dir / f"{name}.cfg", serialize(cfg)))
    return paths


def summarize(config_dir: str | Path) -> list[dict]:
    """Rows regime x protocol x {BG, BC}; missing or failed runs are marked absent."""
    config_dir = Path(config_dir)
    rows = []
    for regime in REGIMES:
        for protocol in PROTOCOLS:
            name = grid_name(regime, protocol)
            manifest = None
            cfg_path = config_dir / f"{name}.cfg"
            if cfg_path.exists():
                out = Path(load_config(cfg_path).output_dir)
                if (out / MANIFEST).exists():
                    manifest = load_manifest(out)
            for kind in SELECTIONS:
                row = {"regime": regime, "protocol": protocol, "selection": kind}
                if manifest is None or manifest.status != "success":
                    row["status"] = "absent"
                else:
                    row["status"] = "ok"
                    for split in SPLITS:
                        report = manifest.reports[split][kind]
                        for metric in METRIC_NAMES:
                            row[f"{split}_{metric}"] = report[metric]
                rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    cols = [f"{s}_{m}" for s in SPLITS for m in METRIC_NAMES]
    head = "| regime | protocol | ckpt | " + " | ".join(cols) + " |"
    lines = [head, "|" + "---|" * (3 + len(cols))]
    for r in rows:
        cells = ["absent"] * len(cols) if r["status"] != "ok" else [f"{r[c]:.4f}" for c in cols]
        lines.append(f"| {r['regime']} | {r['protocol']} | {r['selection']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def grid(config_dir: str | Path, run_missing: bool = True) -> list[dict]:
    """Run every ``*.cfg`` of the grid that has no successful manifest, then write the summary."""
    config_dir = Path(config_dir)
    failures = []
    for regime in REGIMES:
        for protocol in PROTOCOLS:
            cfg_path = config_dir / f"{grid_name(regime, protocol)}.cfg"
            if not run_missing or not cfg_path.exists():
                continue
            out = Path(load_config(cfg_path).output_dir)
            if (out / MANIFEST).exists() and load_manifest(out).status == "success":
                continue
            try:
                run(cfg_path)
            except Exception as exc:  # the grid keeps going; the row is reported absent
                log.error("run %s failed: %s", cfg_path.name, exc)
                failures.append(cfg_path.name)
    rows = summarize(config_dir)
    atomic_write_json(config_dir / "summary.json", {"rows": rows, "failures": failures})
    atomic_write_text(config_dir / "summary.md", format_table(rows))
    return rows
