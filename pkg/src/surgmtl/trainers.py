"""Optimisation regimes for the multi-task model.

Regimes
-------
MTL_FT     caption head, then graph head, each alone with everything else
           frozen; then joint fine-tuning on 0.5 * (L_caption + L_graph).
MTL_V      joint training on the same 0.5-weighted sum from the start.
MTL_KD     joint training on task losses plus KL to frozen single-task teachers.
MTL_KD_FT  MTL_KD followed by joint fine-tuning.

Gradients are applied once per mini-batch. Parameter ``.grad`` buffers play
the role of the per-group accumulators and are cleared at every phase entry
and before every step; per-sample weights are uniform (batch-mean losses).
"""
from __future__ import annotations

import copy
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import Adam
from torch.optim.lr_scheduler import LambdaLR

from . import losses as L
from .curriculum import CurriculumSchedule, kernel_for_epoch
from .metrics import SPECIAL_TOKENS, MetricsReport, bleu, cider, interaction_metrics
from .models import GROUPS, MtlModel, PreparedFrame, collate, expand_classifier_head
from .synthdata import PAD, UNK

log = logging.getLogger(__name__)

PHASES = ("PRETRAIN_CICL", "CAPTION", "SCENEGRAPH", "FINETUNE", "JOINT", "KD", "ADAPT")
REGIMES = ("MTL_FT", "MTL_V", "MTL_KD", "MTL_KD_FT")
TASK_GROUPS = ("shared", "caption", "graph")


class NonFiniteLossError(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass
class PhaseConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 0  # > 0 selects the inverse-square-root warmup schedule


@dataclass
class RegimeConfig:
    regime: str = "MTL_FT"
    pretrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(20, 32, 1e-3))
    incremental: PhaseConfig = field(default_factory=lambda: PhaseConfig(10, 32, 5e-4))
    caption: PhaseConfig = field(default_factory=lambda: PhaseConfig(50, 50, 1e-3, 10000))
    graph: PhaseConfig = field(default_factory=lambda: PhaseConfig(250, 32, 1e-5))
    joint: PhaseConfig = field(default_factory=lambda: PhaseConfig(100, 4, 7.5e-6))
    teacher: PhaseConfig = field(default_factory=lambda: PhaseConfig(50, 32, 1e-3))
    adapt: PhaseConfig = field(default_factory=lambda: PhaseConfig(20, 4, 7.5e-6))
    patience: int = 10
    min_delta: float = 1e-4
    convergence_metric: str = "task"  # "task" (val BLEU-4 / Acc, max) or "loss" (val losses, min)
    delta_policy: str = "uniform"
    max_grad_norm: Optional[float] = None
    eval_threshold: float = 0.5
    seed: int = 0
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    supcon_tau: float = 0.07
    incre_temperature: float = 2.0
    kd_temperature: float = 1.0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        for name in ("pretrain", "incremental", "caption", "graph", "joint", "teacher", "adapt"):
            p = getattr(self, name)
            # MTL_FT may skip its task-aware phases (epochs 0); everything else must run.
            floor = 0 if name in ("caption", "graph") else 1
            if p.epochs < floor or p.batch_size < 1 or not p.lr > 0 or p.warmup_steps < 0:
                raise ValueError(f"invalid phase settings for {name}: {p}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.delta_policy != "uniform":
            raise ValueError("only the uniform per-sample weighting is supported")
        if self.convergence_metric not in ("loss", "task"):
            raise ValueError("convergence_metric must be 'loss' or 'task'")


@dataclass
class ConvergencePolicy:
    metric: str
    mode: str = "min"
    patience: int = 10
    min_delta: float = 1e-4

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")


def check_convergence(history: Sequence[float], policy: ConvergencePolicy) -> bool:
    """True once the last ``patience`` values all fail to beat the earlier best by ``min_delta``."""
    if len(history) <= policy.patience:
        return False
    earlier = history[: -policy.patience]
    recent = history[-policy.patience:]
    if policy.mode == "min":
        return not any(v < min(earlier) - policy.min_delta for v in recent)
    return not any(v > max(earlier) + policy.min_delta for v in recent)


@dataclass
class TaskData:
    train: list[PreparedFrame]
    val: list[PreparedFrame]
    split: str = "SD"


@dataclass
class Snapshot:
    """In-memory copy of a model at a best-metric event."""
    epoch: int
    phase: str
    value: float
    state: dict
    config: object
    sigma: dict
    clock: dict

    def restore(self, dtype: torch.dtype = torch.float32) -> MtlModel:
        model = MtlModel(self.config)
        model.to(dtype)
        model.load_state_dict(self.state)
        model.set_sigma_state(self.sigma)
        model.curriculum_clock = dict(self.clock)
        return model.eval()


def take_snapshot(model: MtlModel, epoch: int, phase: str, value: float) -> Snapshot:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Snapshot(epoch, phase, value, state, model.config, model.sigma_state(), dict(model.curriculum_clock))


class BestTracker:
    """Keeps the best-graph (val Acc) and best-caption (val BLEU-4) snapshots."""

    def __init__(self, on_best: Optional[Callable[[str, Snapshot, MtlModel], None]] = None):
        self.on_best = on_best
        self.best: dict[str, Snapshot] = {}

    def reset(self) -> None:
        self.best = {}

    def update(self, model: MtlModel, epoch: int, phase: str, metrics: dict) -> None:
        for kind, key in (("BG", "acc"), ("BC", "bleu4")):
            value = metrics.get(key)
            if value is None or not math.isfinite(value):
                continue
            if kind not in self.best or value > self.best[kind].value:
                snap = take_snapshot(model, epoch, phase, value)
                self.best[kind] = snap
                if self.on_best is not None:
                    self.on_best(kind, snap, model)


@dataclass
class PhaseState:
    """Which phase is running plus instrumentation of the gradient accumulators."""
    phase: Optional[str] = None
    boundary_norms: list = field(default_factory=list)
    convergence: dict = field(default_factory=dict)

    def enter(self, phase: str, model: torch.nn.Module) -> None:
        for p in model.parameters():
            if p.grad is not None:
                p.grad.zero_()
        total = sum(float(p.grad.abs().sum()) for p in model.parameters() if p.grad is not None)
        if total != 0.0:
            raise RuntimeError("gradient accumulators not cleared at phase entry")
        self.boundary_norms.append((phase, total))
        self.phase = phase
        self.convergence = {}

    @staticmethod
    def accumulators(model: MtlModel) -> dict:
        return {g: [p.grad for p in model.group_parameters(g)] for g in GROUPS}


@dataclass
class History:
    phases: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    frozen_drift: list = field(default_factory=list)
    best: dict = field(default_factory=dict)

    def phase_rows(self, phase: str) -> list:
        return [r for r in self.epochs if r["phase"] == phase]

    def step_losses(self, phase: Optional[str] = None) -> list:
        return [s["loss"] for s in self.steps if phase is None or s["phase"] == phase]


# ---------------------------------------------------------------------------
# freezing


def freeze(model: MtlModel, group: str) -> None:
    for p in model.group_parameters(group):
        p.requires_grad_(False)
        p.grad = None


def unfreeze(model: MtlModel, group: str) -> None:
    for p in model.group_parameters(group):
        p.requires_grad_(True)


def set_trainable(model: MtlModel, groups: Sequence[str]) -> None:
    for g in GROUPS:
        (unfreeze if g in groups else freeze)(model, g)


def freeze_model(model: MtlModel) -> MtlModel:
    for g in GROUPS:
        freeze(model, g)
    return model.eval()


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def evaluate_frames(model: MtlModel, frames: Sequence[PreparedFrame], batch_size: int = 32,
                    threshold: float = 0.5, split: str = "SD", with_report: bool = False):
    """Validation losses plus caption and interaction metrics over ``frames``."""
    was_training = model.training
    model.eval()
    cands, refs, scores, labels = [], [], [], []
    cap_loss = graph_loss = 0.0
    n_tok = n_edge_el = 0
    for start in range(0, len(frames), batch_size):
        batch = collate(frames[start:start + batch_size])
        maps = model.shared_maps(batch)
        logits = model.caption_logits(batch, maps)
        targets = batch.tokens[:, 1:]
        keep = targets != PAD
        k = int(keep.sum())
        cap_loss += float(L.caption_ce_loss(logits, targets)) * k
        n_tok += k
        edge_logits = model.edge_logits(batch, maps)
        graph_loss += float(L.interaction_ml_loss(edge_logits, batch.labels)) * batch.labels.numel()
        n_edge_el += batch.labels.numel()
        regions = model.regions(batch, maps)
        cands += model.caption_generate(regions, None, batch.region_mask)
        refs += [row[row != PAD].tolist() for row in batch.tokens]
        scores.append(torch.sigmoid(edge_logits).double().numpy())
        labels.append(batch.labels.numpy())
    model.train(was_training)
    scores_np, labels_np = np.concatenate(scores), np.concatenate(labels)
    acc, m_ap, recall = interaction_metrics(scores_np, labels_np, threshold)
    out = {
        "caption_loss": cap_loss / n_tok,
        "graph_loss": graph_loss / n_edge_el,
        "bleu4": _safe_bleu(cands, refs),
        "cider": cider(cands, refs),
        "acc": acc, "map": m_ap, "recall": recall,
    }
    if with_report:
        report = MetricsReport(out["bleu4"], out["cider"], acc, m_ap, recall, split, len(frames))
        return out, report
    return out


def _safe_bleu(cands, refs) -> float:
    # An empty generation (BOS/EOS only) is scored as a single unknown token,
    # so it adds length without matches instead of aborting the corpus score.
    cands = [c if any(t not in SPECIAL_TOKENS for t in c) else [UNK] for c in cands]
    return bleu(cands, refs)


def evaluate_model(model: MtlModel, frames: Sequence[PreparedFrame], split: str,
                   threshold: float = 0.5) -> MetricsReport:
    _, report = evaluate_frames(model, frames, threshold=threshold, split=split, with_report=True)
    return report


# ---------------------------------------------------------------------------
# augmentation for contrastive pretraining


def augment_views(crops: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Random flip, hue rotation, brightness/contrast jitter and pixel noise."""
    n = crops.shape[0]
    dtype = crops.dtype

    def rand(*shape):
        return torch.rand(*shape, generator=generator, dtype=torch.float64).to(dtype)

    flip = rand(n) < 0.5
    x = torch.where(flip[:, None, None, None], crops.flip(-1), crops)
    theta = (rand(n) - 0.5) * (math.pi / 2)  # +-45 degrees
    c, s = torch.cos(theta), torch.sin(theta)
    k = 1.0 / math.sqrt(3.0)
    eye = torch.eye(3, dtype=dtype)
    ones = torch.full((3, 3), 1.0 / 3.0, dtype=dtype)
    cross = torch.tensor([[0, -k, k], [k, 0, -k], [-k, k, 0]], dtype=dtype)
    rot = c[:, None, None] * eye + (1 - c)[:, None, None] * ones + s[:, None, None] * cross
    x = torch.einsum("nij,njhw->nihw", rot, x)
    contrast = 0.75 + 0.55 * rand(n)
    bright = (rand(n) - 0.5) * 0.3
    x = 0.5 + contrast[:, None, None, None] * (x - 0.5) + bright[:, None, None, None]
    noise = torch.randn(x.shape, generator=generator, dtype=torch.float64).to(dtype) * 0.02
    return (x + noise).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# the training engine


class Trainer:
    """Runs phases on one model and keeps a single history/phase log for them."""

    def __init__(self, model: MtlModel, cfg: RegimeConfig,
                 recorder: Optional[Callable[[dict], None]] = None,
                 tracker: Optional[BestTracker] = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.recorder = recorder
        self.tracker = tracker if tracker is not None else BestTracker()
        self.state = PhaseState()
        self.history = History()
        self.global_epoch = 0
        self._t0 = time.perf_counter()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    # -- bookkeeping ------------------------------------------------------

    def _record(self, phase: str, epoch: int, split: str, metrics: dict) -> None:
        if self.recorder is None:
            return
        sigma = self.model.sigma_state()
        wall = time.perf_counter() - self._t0
        for name, value in metrics.items():
            self.recorder({"phase": phase, "epoch": epoch, "split": split, "metric": name,
                           "value": float(value), "sigma": sigma, "wallclock": wall})

    def _batches(self, n: int, batch_size: int, epoch: int, stream: int = 0, min_size: int = 1) -> list:
        # Order depends only on (seed, stream, epoch), never on phase history.
        rng = np.random.default_rng([self.cfg.seed, stream, epoch])
        perm = rng.permutation(n)
        chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
        if len(chunks) > 1 and len(chunks[-1]) < min_size:
            chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
            chunks.pop()
        return chunks

    def _optimizer(self, params: list, pcfg: PhaseConfig):
        opt = Adam(params, lr=pcfg.lr)
        if pcfg.warmup_steps > 0:
            w = pcfg.warmup_steps
            sched = LambdaLR(opt, lambda step: min((step + 1) / w, math.sqrt(w / (step + 1))))
        else:
            sched = None
        return opt, sched

    def _set_curriculum(self, groups: Sequence[str]) -> None:
        filters = self.model.filters()
        for g in groups:
            filters[g].set_kernel(kernel_for_epoch(self.cfg.curriculum, self.model.curriculum_clock[g]))

    def _frozen_snapshot(self, trainable: Sequence[str]) -> dict:
        return {g: [p.detach().clone() for p in self.model.group_parameters(g)]
                for g in GROUPS if g not in trainable}

    def _frozen_drift(self, snap: dict) -> float:
        drift = 0.0
        for g, ref in snap.items():
            for p, r in zip(self.model.group_parameters(g), ref):
                drift += float((p.detach() - r).abs().sum())
        return drift

    def _step(self, loss: torch.Tensor, opt, sched, params) -> None:
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss in phase {self.state.phase}")
        loss.backward()
        if self.cfg.max_grad_norm:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.max_grad_norm)
        opt.step()
        if sched is not None:
            sched.step()

    # -- generic task phase ---------------------------------------------

    def run_phase(self, phase: str, data: TaskData, trainable: Sequence[str], curriculum: Sequence[str],
                  pcfg: PhaseConfig, loss_fn: Callable, track: Sequence[str]) -> None:
        """Train ``trainable`` groups on ``loss_fn`` until a tracked metric converges.

        ``loss_fn(batch)`` returns (loss, parts). Tracked names are validation
        metrics; the phase ends when any of them stops improving.
        """
        model = self.model
        set_trainable(model, trainable)
        self.state.enter(phase, model)
        self.history.phases.append(phase)
        params = [p for g in trainable for p in model.group_parameters(g)]
        opt, sched = self._optimizer(params, pcfg)
        frozen = self._frozen_snapshot(trainable)
        policies = [self._policy(m) for m in track]
        for epoch in range(pcfg.epochs):
            self._set_curriculum(curriculum)
            model.train()
            epoch_losses = []
            for idx in self._batches(len(data.train), pcfg.batch_size, self.global_epoch):
                batch = collate([data.train[i] for i in idx])
                opt.zero_grad(set_to_none=False)
                loss, parts = loss_fn(batch)
                self._step(loss, opt, sched, params)
                value = float(loss.detach())
                epoch_losses.append(value)
                self.history.steps.append({"phase": phase, "epoch": self.global_epoch, "loss": value,
                                           **{k: float(v) for k, v in parts.items()}})
            for g in curriculum:
                model.curriculum_clock[g] += 1
            drift = self._frozen_drift(frozen)
            self.history.frozen_drift.append((phase, self.global_epoch, drift))
            if drift != 0.0:
                raise FreezeViolation(f"frozen parameters moved by {drift} in phase {phase}")
            metrics = evaluate_frames(model, data.val, threshold=self.cfg.eval_threshold)
            train_loss = float(np.mean(epoch_losses))
            self.history.epochs.append({"phase": phase, "epoch": self.global_epoch, "train_loss": train_loss,
                                        "sigma": model.sigma_state(), **metrics})
            self._record(phase, self.global_epoch, "train", {"loss": train_loss})
            self._record(phase, self.global_epoch, "val", metrics)
            self.tracker.update(model, self.global_epoch, phase, metrics)
            self.global_epoch += 1
            converged = False
            for pol in policies:
                hist = self.state.convergence.setdefault(pol.metric, [])
                hist.append(metrics[pol.metric])
                converged |= check_convergence(hist, pol)
            if converged:
                log.info("%s converged after %d epochs", phase, epoch + 1)
                break
        set_trainable(model, ())

    def _policy(self, metric: str) -> ConvergencePolicy:
        mode = "min" if metric.endswith("loss") else "max"
        return ConvergencePolicy(metric, mode, self.cfg.patience, self.cfg.min_delta)

    def _tracked(self, task: str) -> str:
        if self.cfg.convergence_metric == "loss":
            return f"{task}_loss"
        return "bleu4" if task == "caption" else "acc"

    # -- losses -------------------------------------------------------------

    def caption_step(self, batch):
        loss = L.caption_ce_loss(self.model.caption_logits(batch), batch.tokens[:, 1:])
        return loss, {"caption_loss": loss.detach()}

    def graph_step(self, batch):
        loss = L.interaction_ml_loss(self.model.edge_logits(batch), batch.labels)
        return loss, {"graph_loss": loss.detach()}

    def joint_step(self, batch, combine=L.finetune_loss):
        out = self.model(batch)
        lc = L.caption_ce_loss(out["caption"], batch.tokens[:, 1:])
        lg = L.interaction_ml_loss(out["graph"], batch.labels)
        loss = combine(lc, lg, self.cfg.weights)
        return loss, {"caption_loss": lc.detach(), "graph_loss": lg.detach()}

    def kd_step(self, batch, teacher_caption: MtlModel, teacher_graph: MtlModel):
        out = self.model(batch)
        targets = batch.tokens[:, 1:]
        lc = L.caption_ce_loss(out["caption"], targets)
        lg = L.interaction_ml_loss(out["graph"], batch.labels)
        with torch.no_grad():
            tc = teacher_caption.caption_logits(batch)
            tg = teacher_graph.edge_logits(batch)
        t = self.cfg.kd_temperature
        kl_c = L.kl_logits(out["caption"], tc, t, "softmax", mask=targets != PAD)
        kl_g = L.kl_logits(out["graph"], tg, t, "bernoulli")
        loss = L.kd_loss(lc, lg, kl_c, kl_g, self.cfg.weights)
        return loss, {"caption_loss": lc.detach(), "graph_loss": lg.detach(),
                      "kl_caption": kl_c.detach(), "kl_graph": kl_g.detach()}

    # -- contrastive class-incremental pretraining ------------------------

    def pretrain_cicl(self, frames: Sequence[PreparedFrame], old_model: Optional[MtlModel] = None,
                      pcfg: Optional[PhaseConfig] = None, tag: str = "PRETRAIN_CICL") -> None:
        """Train W_sh on supervised-contrastive (+ incremental KD) loss over node crops.

        The classifier learns on detached features with cross-entropy, so the
        extractor only sees the contrastive/distillation objective.
        """
        model = self.model
        pcfg = pcfg or (self.cfg.incremental if old_model is not None else self.cfg.pretrain)
        crops = torch.cat([f.crops for f in frames])
        labels = torch.cat([f.classes for f in frames])
        if int(labels.max()) >= model.classifier_head.n_classes:
            raise ValueError("crop labels exceed the classifier head; expand it first")
        if old_model is not None:
            freeze_model(old_model)
        trainable = ("shared", "classifier")
        set_trainable(model, trainable)
        self.state.enter("PRETRAIN_CICL", model)
        if not self.history.phases or self.history.phases[-1] != "PRETRAIN_CICL":
            self.history.phases.append("PRETRAIN_CICL")
        params = [p for g in trainable for p in model.group_parameters(g)]
        opt, sched = self._optimizer(params, pcfg)
        frozen = self._frozen_snapshot(trainable)
        gen = torch.Generator().manual_seed(self.cfg.seed * 7919 + zlib.crc32(tag.encode()))
        for epoch in range(pcfg.epochs):
            self._set_curriculum(("shared",))
            model.train()
            epoch_losses = []
            for idx in self._batches(len(crops), pcfg.batch_size, epoch, stream=1 + zlib.crc32(tag.encode()), min_size=2):
                idx_t = torch.as_tensor(idx)
                views = torch.cat([augment_views(crops[idx_t], gen), augment_views(crops[idx_t], gen)])
                y = labels[idx_t].repeat(2)
                opt.zero_grad(set_to_none=False)
                feats = model.extract_features(views)
                z = F.normalize(feats, dim=1)
                contra = L.supcon_loss(z, y, self.cfg.supcon_tau, check_norm=False)
                incre = None
                if old_model is not None:
                    with torch.no_grad():
                        old_logits = old_model.classify(old_model.extract_features(views))
                    incre = L.incremental_kd_loss(old_logits, model.classify(feats), self.cfg.incre_temperature)
                total = L.cicl_total_loss(contra, incre)
                ce = F.cross_entropy(model.classify(feats.detach()), y)
                loss = total + ce
                self._step(loss, opt, sched, params)
                epoch_losses.append(float(total.detach()))
                self.history.steps.append({
                    "phase": "PRETRAIN_CICL", "epoch": epoch, "stage": tag, "loss": float(total.detach()),
                    "contra": float(contra.detach()), "incre": 0.0 if incre is None else float(incre.detach()),
                    "ce": float(ce.detach())})
            model.curriculum_clock["shared"] += 1
            drift = self._frozen_drift(frozen)
            self.history.frozen_drift.append(("PRETRAIN_CICL", epoch, drift))
            if drift != 0.0:
                raise FreezeViolation(f"frozen parameters moved by {drift} during pretraining")
            acc = classification_accuracy(model, crops, labels)
            self.history.epochs.append({"phase": "PRETRAIN_CICL", "stage": tag, "epoch": epoch,
                                        "train_loss": float(np.mean(epoch_losses)), "cls_acc": acc,
                                        "sigma": model.sigma_state()})
            self._record("PRETRAIN_CICL", epoch, "train", {"loss": float(np.mean(epoch_losses)),
                                                           "cls_acc": acc})
        set_trainable(model, ())

    def pretrain_incremental(self, frames: Sequence[PreparedFrame], n_new: int) -> MtlModel:
        """Expand the classifier by ``n_new`` classes and continue contrastive
        pretraining with the pre-expansion model as a frozen distillation source."""
        old = freeze_model(copy.deepcopy(self.model))
        expand_classifier_head(self.model, n_new)
        self.pretrain_cicl(frames, old_model=old, tag="PRETRAIN_CICL/incremental")
        return old

    # -- regimes ----------------------------------------------------------------

    def task_aware(self, data: TaskData) -> None:
        cfg = self.cfg
        if cfg.caption.epochs:
            self.run_phase("CAPTION", data, ("caption",), ("caption",), cfg.caption, self.caption_step,
                           (self._tracked("caption"),))
        if cfg.graph.epochs:
            self.run_phase("SCENEGRAPH", data, ("graph",), ("graph",), cfg.graph, self.graph_step,
                           (self._tracked("graph"),))

    def finetune(self, data: TaskData, phase: str = "FINETUNE", pcfg: Optional[PhaseConfig] = None) -> None:
        # Fine-tuning keeps whatever sigma each sub-module ended its curriculum with.
        self.run_phase(phase, data, TASK_GROUPS, (), pcfg or self.cfg.joint,
                       lambda b: self.joint_step(b, L.finetune_loss),
                       (self._tracked("caption"), self._tracked("graph")))

    def vanilla(self, data: TaskData, phase: str = "JOINT", pcfg: Optional[PhaseConfig] = None,
                curriculum: Sequence[str] = ("caption", "graph")) -> None:
        self.run_phase(phase, data, TASK_GROUPS, curriculum, pcfg or self.cfg.joint,
                       lambda b: self.joint_step(b, L.vanilla_loss),
                       (self._tracked("caption"), self._tracked("graph")))

    def distill(self, data: TaskData, teacher_caption: MtlModel, teacher_graph: MtlModel,
                phase: str = "KD", pcfg: Optional[PhaseConfig] = None,
                curriculum: Sequence[str] = ("caption", "graph")) -> None:
        check_teachers(self.model, teacher_caption, teacher_graph)
        freeze_model(teacher_caption)
        freeze_model(teacher_graph)
        self.run_phase(phase, data, TASK_GROUPS, curriculum, pcfg or self.cfg.joint,
                       lambda b: self.kd_step(b, teacher_caption, teacher_graph),
                       (self._tracked("caption"), self._tracked("graph")))

    def run_regime(self, data: TaskData, teachers: Optional[tuple] = None) -> None:
        regime = self.cfg.regime
        if regime == "MTL_FT":
            self.task_aware(data)
            self.finetune(data)
        elif regime == "MTL_V":
            self.vanilla(data)
        elif regime in ("MTL_KD", "MTL_KD_FT"):
            if teachers is None:
                raise ValueError(f"{regime} needs single-task teachers")
            self.distill(data, *teachers)
            if regime == "MTL_KD_FT":
                self.finetune(data)
        else:
            raise ValueError(f"unknown regime {regime!r}")

    def adapt(self, data: TaskData, teachers: Optional[tuple] = None) -> None:
        """Few-shot continuation on target-domain frames with the regime's last objective.

        Best-graph/best-caption selection restarts here and uses target validation frames.
        """
        self.tracker.reset()
        regime, pcfg = self.cfg.regime, self.cfg.adapt
        if regime in ("MTL_FT", "MTL_KD_FT"):
            self.finetune(data, "ADAPT", pcfg)
        elif regime == "MTL_V":
            self.vanilla(data, "ADAPT", pcfg, curriculum=())
        else:
            if teachers is None:
                raise ValueError("MTL_KD adaptation needs the teachers")
            self.distill(data, *teachers, phase="ADAPT", pcfg=pcfg, curriculum=())

    def finish(self) -> History:
        self.history.best = dict(self.tracker.best)
        return self.history


@torch.no_grad()
def classification_accuracy(model: MtlModel, crops: torch.Tensor, labels: torch.Tensor) -> float:
    was = model.training
    model.eval()
    pred = model.classify(model.extract_features(crops)).argmax(dim=1)
    model.train(was)
    return float((pred == labels).double().mean())


def check_teachers(student: MtlModel, teacher_caption: MtlModel, teacher_graph: MtlModel) -> None:
    sc = student.config
    if teacher_caption.config.vocab_size != sc.vocab_size or \
            teacher_caption.config.max_caption_len != sc.max_caption_len:
        raise ValueError("caption teacher logits are incompatible with the student")
    if teacher_graph.config.n_interactions != sc.n_interactions:
        raise ValueError("graph teacher logits are incompatible with the student")


def train_teachers(pretrained: MtlModel, data: TaskData, cfg: RegimeConfig) -> tuple[MtlModel, MtlModel]:
    """Single-task caption and graph models grown from the same pretrained weights."""
    teachers = []
    for task in ("caption", "graph"):
        model = copy.deepcopy(pretrained)
        tcfg = copy.deepcopy(cfg)
        trainer = Trainer(model, tcfg)
        step = trainer.caption_step if task == "caption" else trainer.graph_step
        trainer.run_phase(f"TEACHER_{task.upper()}", data, ("shared", task), (task,), cfg.teacher, step,
                          (trainer._tracked(task),))
        best = trainer.tracker.best.get("BC" if task == "caption" else "BG")
        teacher = best.restore(trainer.dtype) if best is not None else model
        teachers.append(freeze_model(teacher))
    return teachers[0], teachers[1]


# ---------------------------------------------------------------------------
# functional entry points


def pretrain_cicl(model: MtlModel, sd_data: Sequence[PreparedFrame], cfg: RegimeConfig,
                  old_model: Optional[MtlModel] = None) -> MtlModel:
    Trainer(model, cfg).pretrain_cicl(sd_data, old_model)
    return model


def train_task_aware(model: MtlModel, sd_data: TaskData, cfg: RegimeConfig):
    trainer = Trainer(model, cfg)
    trainer.task_aware(sd_data)
    return model, trainer.finish()


def finetune_joint(model: MtlModel, sd_data: TaskData, cfg: RegimeConfig):
    trainer = Trainer(model, cfg)
    trainer.finetune(sd_data)
    return model, trainer.finish()


def train_vanilla(model: MtlModel, sd_data: TaskData, cfg: RegimeConfig):
    trainer = Trainer(model, cfg)
    trainer.vanilla(sd_data)
    return model, trainer.finish()


def train_kd(model: MtlModel, teacher_caption: MtlModel, teacher_graph: MtlModel,
             sd_data: TaskData, cfg: RegimeConfig):
    trainer = Trainer(model, cfg)
    trainer.distill(sd_data, teacher_caption, teacher_graph)
    return model, trainer.finish()


def train_kd_ft(model: MtlModel, teacher_caption: MtlModel, teacher_graph: MtlModel,
                sd_data: TaskData, cfg: RegimeConfig):
    trainer = Trainer(model, cfg)
    trainer.distill(sd_data, teacher_caption, teacher_graph)
    trainer.finetune(sd_data)
    return model, trainer.finish()


def adapt_few_shot(model: MtlModel, td_data: TaskData, cfg: RegimeConfig, teachers: Optional[tuple] = None):
    trainer = Trainer(model, cfg)
    trainer.adapt(td_data, teachers)
    return model, trainer.finish()
