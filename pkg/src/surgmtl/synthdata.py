"""Synthetic tool-tissue scenes with a controllable source -> target domain shift.

Every frame holds one tissue blob and 1..max_instruments textured instrument
boxes. Interactions follow a fixed table keyed on (instrument class, whether
the instrument touches the tissue), and captions are rendered from a fixed
template, so every label is recoverable from the image plus boxes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

TISSUE_NAMES = ("kidney", "oropharynx", "liver")
INSTRUMENT_NAMES = (
    "bipolar_forceps", "prograsp_forceps", "monopolar_curved_scissors", "clip_applier",
    "suction", "ultrasound_probe", "stapler", "large_needle_driver",
    "spatulated_monopolar_cautery", "maryland_dissector",
)
INTERACTION_NAMES = (
    "manipulating", "grasping", "retracting", "cutting", "cauterizing", "looping",
    "suctioning", "clipping", "ultrasound_sensing", "stapling", "suturing",
)
TEMPLATE_WORDS = ("is", "being", "by", "and")


@dataclass(frozen=True)
class DatasetConfig:
    n_frames: int = 96
    n_classes: int = 8                # tissue classes first, then instrument classes
    n_tissue_classes: int = 1
    n_interactions: int = 5
    image_size: int = 64
    channels: int = 3
    max_instruments: int = 3
    max_caption_len: int = 16
    novel_class_ids: tuple[int, ...] = ()
    novel_frame_fraction: float = 0.0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if self.image_size < 32:
            raise ValueError("images smaller than 32x32 are not supported")
        if not 1 <= self.n_tissue_classes < self.n_classes:
            raise ValueError("need at least one tissue and one instrument class")
        if self.n_interactions < 1:
            raise ValueError("need at least one interaction class")
        if self.max_instruments < 1:
            raise ValueError("max_instruments must be >= 1")
        if self.channels != 3:
            raise ValueError("only RGB rendering is supported")
        novel = set(self.novel_class_ids)
        if novel and min(novel) < self.n_tissue_classes:
            raise ValueError("novel classes must be instrument classes")
        if novel and set(range(self.n_classes - len(novel), self.n_classes)) != novel:
            # Incremental heads append rows, so novel ids must be the highest ids.
            raise ValueError("novel_class_ids must be the highest class ids")
        if len(novel) >= self.n_classes - self.n_tissue_classes:
            raise ValueError("at least one instrument class must be a base class")
        if not 0.0 <= self.novel_frame_fraction <= 1.0:
            raise ValueError("novel_frame_fraction must lie in [0, 1]")
        if self.max_caption_len < 2 + 3 + 3 * self.max_instruments + (self.max_instruments - 1):
            raise ValueError("max_caption_len too short for the caption template")

    @property
    def instrument_classes(self) -> tuple[int, ...]:
        return tuple(range(self.n_tissue_classes, self.n_classes))

    @property
    def base_instrument_classes(self) -> tuple[int, ...]:
        novel = set(self.novel_class_ids)
        return tuple(c for c in self.instrument_classes if c not in novel)


@dataclass(frozen=True)
class Node:
    class_id: int
    role: str  # "tissue" | "instrument"
    bbox: tuple[int, int, int, int]  # x1, y1, x2, y2 in pixels, exclusive max


@dataclass(frozen=True)
class Edge:
    tissue_idx: int
    instrument_idx: int
    interactions: tuple[int, ...]  # multi-hot, length n_interactions


@dataclass(frozen=True, eq=False)
class SceneInstance:
    image: np.ndarray  # H x W x C float64 in [0, 1]
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    caption: tuple[int, ...]

    @property
    def tissue_index(self) -> int:
        return next(i for i, n in enumerate(self.nodes) if n.role == "tissue")

    def class_set(self) -> set[int]:
        return {n.class_id for n in self.nodes}


@dataclass(frozen=True)
class DomainShiftSpec:
    brightness_delta: float = 0.0
    contrast_scale: float = 1.0
    hue_rotation: float = 0.0  # degrees about the grey axis
    novel_class_ids: tuple[int, ...] = ()
    td_train_fraction: float = 0.5
    base_share: float = 0.2  # fraction of base frames moved to the target domain

    def validate(self) -> None:
        if not self.contrast_scale > 0:
            raise ValueError("contrast_scale must be positive")
        if not 0.0 < self.td_train_fraction <= 1.0:
            raise ValueError("td_train_fraction must lie in (0, 1]")
        if not 0.0 <= self.base_share <= 1.0:
            raise ValueError("base_share must lie in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.brightness_delta == 0 and self.contrast_scale == 1 and self.hue_rotation == 0


class Vocabulary:
    """Token <-> id bijection with PAD/BOS/EOS/UNK pinned to ids 0..3."""

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(RESERVED)
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = [self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK] for i in ids]
        if strip:
            out = [w for w in out if w not in RESERVED[:3]]
        return out

    @classmethod
    def for_config(cls, config: DatasetConfig) -> "Vocabulary":
        words = [tissue_name(c) for c in range(config.n_tissue_classes)]
        words += list(TEMPLATE_WORDS)
        words += [interaction_name(k) for k in range(config.n_interactions)]
        words += [class_name(c, config) for c in config.instrument_classes]
        return cls(words)


@dataclass(frozen=True, eq=False)
class SceneDataset:
    frames: tuple[SceneInstance, ...]
    config: DatasetConfig
    seed: int
    domain: str = "ALL"  # ALL | SD | TD
    train_indices: tuple[int, ...] = ()  # few-shot split (TD only)
    source_indices: tuple[int, ...] = ()  # index of each frame in the generated dataset

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.for_config(self.config)

    def subset(self, indices: Sequence[int], domain: Optional[str] = None) -> "SceneDataset":
        src = self.source_indices or tuple(range(len(self.frames)))
        return SceneDataset(tuple(self.frames[i] for i in indices), self.config, self.seed,
                            domain or self.domain, (), tuple(src[i] for i in indices))

    def train_split(self) -> "SceneDataset":
        return self.subset(self.train_indices)

    def eval_split(self) -> "SceneDataset":
        held = set(self.train_indices)
        return self.subset([i for i in range(len(self.frames)) if i not in held])

    def class_set(self) -> set[int]:
        out: set[int] = set()
        for f in self.frames:
            out |= f.class_set()
        return out


def tissue_name(class_id: int) -> str:
    return TISSUE_NAMES[class_id] if class_id < len(TISSUE_NAMES) else f"tissue_{class_id}"


def class_name(class_id: int, config: DatasetConfig) -> str:
    if class_id < config.n_tissue_classes:
        return tissue_name(class_id)
    j = class_id - config.n_tissue_classes
    return INSTRUMENT_NAMES[j] if j < len(INSTRUMENT_NAMES) else f"instrument_{j}"


def interaction_name(k: int) -> str:
    return INTERACTION_NAMES[k] if k < len(INTERACTION_NAMES) else f"interaction_{k}"


def interaction_table(config: DatasetConfig) -> dict[tuple[int, bool], tuple[int, ...]]:
    """Interaction ids per (instrument class, touching tissue).

    Apart instruments carry their primary interaction only; touching ones add a
    contact interaction half the label space away.
    """
    k = config.n_interactions
    table = {}
    for c in config.instrument_classes:
        j = c - config.n_tissue_classes
        primary = j % k
        contact = (j + (k + 1) // 2) % k
        table[(c, False)] = (primary,)
        table[(c, True)] = tuple(sorted({primary, contact}))
    return table


def primary_interaction(class_id: int, config: DatasetConfig) -> int:
    return (class_id - config.n_tissue_classes) % config.n_interactions


# ---------------------------------------------------------------------------
# rendering


def _class_style(class_id: int) -> tuple[np.ndarray, float, float]:
    rng = np.random.default_rng([0xC1A55, class_id])
    hue = (class_id * 0.61803398875) % 1.0
    rgb = 0.35 + 0.6 * np.array([
        0.5 + 0.5 * math.cos(2 * math.pi * (hue + s)) for s in (0.0, 1 / 3, 2 / 3)
    ])
    angle = (class_id * 47.0) % 180.0 * math.pi / 180.0
    freq = 0.18 + 0.12 * rng.random()
    return rgb, angle, freq


def _render(config: DatasetConfig, nodes: Sequence[Node], rng: np.random.Generator) -> np.ndarray:
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.empty((s, s, 3))
    img[...] = np.array([0.18, 0.08, 0.08])
    img += 0.03 * rng.standard_normal((s, s, 1))
    for node in nodes:
        x1, y1, x2, y2 = node.bbox
        rgb, angle, freq = _class_style(node.class_id)
        if node.role == "tissue":
            cx, cy = (x1 + x2 - 1) / 2, (y1 + y2 - 1) / 2
            rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
            inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
            shade = 0.85 + 0.15 * np.sin(0.35 * xx + 0.2 * yy)
            img[inside] = (rgb[None, :] * shade[inside][:, None]) * 0.8
        else:
            proj = xx[y1:y2, x1:x2] * math.cos(angle) + yy[y1:y2, x1:x2] * math.sin(angle)
            stripes = 0.7 + 0.3 * np.sign(np.sin(2 * math.pi * freq * proj))
            img[y1:y2, x1:x2] = rgb[None, None, :] * stripes[..., None]
    img += 0.02 * rng.standard_normal((s, s, 3))
    return np.clip(img, 0.0, 1.0)


def _boxes_touch(a: Sequence[int], b: Sequence[int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _gap(a: Sequence[int], b: Sequence[int]) -> int:
    dx = max(b[0] - a[2], a[0] - b[2], 0)
    dy = max(b[1] - a[3], a[1] - b[3], 0)
    return max(dx, dy)


def _place_instrument(rng: np.random.Generator, s: int, tissue: tuple, contact: bool,
                      others: Sequence[tuple]) -> Optional[tuple]:
    tx1, ty1, tx2, ty2 = tissue
    for _ in range(200):
        w, h = int(rng.integers(10, 17)), int(rng.integers(10, 17))
        if contact:
            # centre strictly inside the tissue box
            cx = int(rng.integers(tx1 + 3, tx2 - 3))
            cy = int(rng.integers(ty1 + 3, ty2 - 3))
            x1, y1 = cx - w // 2, cy - h // 2
        else:
            x1, y1 = int(rng.integers(0, s - w + 1)), int(rng.integers(0, s - h + 1))
        box = (x1, y1, x1 + w, y1 + h)
        if x1 < 0 or y1 < 0 or box[2] > s or box[3] > s:
            continue
        if not contact and _gap(box, tissue) < 3:
            continue
        if any(_boxes_touch(box, o) for o in others):
            continue
        return box
    return None


def _caption_tokens(config: DatasetConfig, vocab: Vocabulary, tissue_cls: int,
                    mentions: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    words = [tissue_name(tissue_cls), "is", "being"]
    for i, (inter, cls) in enumerate(mentions):
        if i:
            words.append("and")
        words += [interaction_name(inter), "by", class_name(cls, config)]
    return tuple([BOS] + vocab.encode(words) + [EOS])


def _make_frame(config: DatasetConfig, vocab: Vocabulary, rng: np.random.Generator,
                target_interaction: int, novel_frame: bool) -> SceneInstance:
    s = config.image_size
    table = interaction_table(config)
    tissue_cls = int(rng.integers(0, config.n_tissue_classes))
    tw, th = int(rng.integers(s * 7 // 16, s * 5 // 8 + 1)), int(rng.integers(s * 7 // 16, s * 5 // 8 + 1))
    tx1, ty1 = int(rng.integers(2, s - tw - 1)), int(rng.integers(2, s - th - 1))
    tissue_box = (tx1, ty1, tx1 + tw, ty1 + th)

    base = list(config.base_instrument_classes)
    novel = sorted(config.novel_class_ids)
    pool = base + novel if novel_frame else base
    n_instr = int(rng.integers(1, min(config.max_instruments, len(pool)) + 1))

    # The first instrument is chosen so that the stratified target interaction occurs.
    candidates = [(c, t) for c in base for t in (False, True) if target_interaction in table[(c, t)]]
    first_cls, first_touch = candidates[int(rng.integers(0, len(candidates)))] if candidates else (
        base[int(rng.integers(0, len(base)))], bool(rng.integers(0, 2)))
    chosen = [(first_cls, first_touch)]
    remaining = [c for c in pool if c != first_cls]
    rng.shuffle(remaining)
    if novel_frame and not any(c in novel for c, _ in chosen):
        nov = [c for c in remaining if c in novel]
        remaining = nov[:1] + [c for c in remaining if c not in nov[:1]]
        n_instr = max(n_instr, 2)
    for c in remaining[: n_instr - 1]:
        chosen.append((c, bool(rng.integers(0, 2))))

    nodes = [Node(tissue_cls, "tissue", tissue_box)]
    placed: list[tuple] = []
    instr: list[tuple[int, bool, tuple]] = []
    for cls, touch in chosen:
        box = _place_instrument(rng, s, tissue_box, touch, placed)
        if box is None:
            box = _place_instrument(rng, s, tissue_box, not touch, placed)
            touch = not touch
        if box is None:
            continue
        placed.append(box)
        instr.append((cls, touch, box))
    # Left-to-right order fixes both node indices and caption order.
    instr.sort(key=lambda t: (t[2][0], t[2][1]))
    edges, mentions = [], []
    for cls, touch, box in instr:
        nodes.append(Node(cls, "instrument", box))
        hot = [0] * config.n_interactions
        for k in table[(cls, touch)]:
            hot[k] = 1
        edges.append(Edge(0, len(nodes) - 1, tuple(hot)))
        mentions.append((primary_interaction(cls, config), cls))
    image = _render(config, nodes, rng)
    caption = _caption_tokens(config, vocab, tissue_cls, mentions)
    return SceneInstance(image, tuple(nodes), tuple(edges), caption)


def generate_dataset(config: DatasetConfig, seed: int) -> SceneDataset:
    """Render ``config.n_frames`` frames; a pure function of (config, seed).

    Frame i's first instrument carries interaction ``i mod n_interactions``, so
    every interaction occurs once n_frames >= n_interactions.
    """
    config.validate()
    vocab = Vocabulary.for_config(config)
    order_rng = np.random.default_rng([seed, 0])
    n_novel = int(round(config.n_frames * config.novel_frame_fraction)) if config.novel_class_ids else 0
    novel_mask = np.zeros(config.n_frames, dtype=bool)
    novel_mask[order_rng.permutation(config.n_frames)[:n_novel]] = True
    frames = []
    for i in range(config.n_frames):
        rng = np.random.default_rng([seed, 1, i])
        frames.append(_make_frame(config, vocab, rng, i % config.n_interactions, bool(novel_mask[i])))
    return SceneDataset(tuple(frames), config, seed, "ALL", (), tuple(range(config.n_frames)))


# ---------------------------------------------------------------------------
# domain shift


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    k = 1.0 / math.sqrt(3.0)
    cross = np.array([[0, -k, k], [k, 0, -k], [-k, k, 0]])
    return c * np.eye(3) + (1 - c) / 3.0 * np.ones((3, 3)) + s * cross


def apply_intensity_shift(image: np.ndarray, shift: DomainShiftSpec) -> np.ndarray:
    """Hue rotation, then value = clamp(0.5 + contrast * (v - 0.5) + brightness)."""
    if shift.is_identity:
        return image.copy()
    out = image
    if shift.hue_rotation != 0:
        out = out @ hue_rotation_matrix(shift.hue_rotation).T
    if shift.contrast_scale != 1 or shift.brightness_delta != 0:
        out = 0.5 + shift.contrast_scale * (out - 0.5) + shift.brightness_delta
    return np.clip(out, 0.0, 1.0)


def split_domains(ds: SceneDataset, shift: DomainShiftSpec, seed: int) -> tuple[SceneDataset, SceneDataset]:
    """Source domain = base-class frames; target = shifted novel frames plus a base share.

    The target carries a few-shot training split of ceil(td_train_fraction * |TD|) frames.
    """
    shift.validate()
    novel = set(shift.novel_class_ids)
    if novel & set(range(ds.config.n_tissue_classes)):
        raise ValueError("novel classes cannot be tissue classes")
    if novel and novel != set(ds.config.novel_class_ids):
        raise ValueError("shift novel_class_ids must match the dataset config")
    rng = np.random.default_rng([seed, 2])
    novel_idx = [i for i, f in enumerate(ds.frames) if f.class_set() & novel]
    base_idx = [i for i, f in enumerate(ds.frames) if not f.class_set() & novel]
    n_move = int(round(shift.base_share * len(base_idx)))
    moved = set(rng.permutation(len(base_idx))[:n_move].tolist())
    sd_idx = [b for j, b in enumerate(base_idx) if j not in moved]
    td_idx = sorted(novel_idx + [b for j, b in enumerate(base_idx) if j in moved])
    if not td_idx:
        raise ValueError("the target domain is empty")
    if not sd_idx:
        raise ValueError("the source domain is empty")
    src = ds.source_indices or tuple(range(len(ds.frames)))
    td_frames = tuple(
        dataclasses.replace(ds.frames[i], image=apply_intensity_shift(ds.frames[i].image, shift))
        for i in td_idx
    )
    n_train = int(math.ceil(shift.td_train_fraction * len(td_idx)))
    train = tuple(sorted(rng.permutation(len(td_idx))[:n_train].tolist()))
    sd = SceneDataset(tuple(ds.frames[i] for i in sd_idx), ds.config, ds.seed, "SD", (),
                      tuple(src[i] for i in sd_idx))
    td = SceneDataset(td_frames, ds.config, ds.seed, "TD", train, tuple(src[i] for i in td_idx))
    return sd, td


def train_val_split(ds: SceneDataset, val_fraction: float, seed: int) -> tuple[SceneDataset, SceneDataset]:
    n_val = int(round(val_fraction * len(ds)))
    if not 0 < n_val < len(ds):
        raise ValueError("validation split must leave both parts non-empty")
    perm = np.random.default_rng([seed, 3]).permutation(len(ds))
    val = sorted(perm[:n_val].tolist())
    train = sorted(perm[n_val:].tolist())
    return ds.subset(train), ds.subset(val)


# ---------------------------------------------------------------------------
# node features


def encode_spatial_feature(box_a: Sequence[float], box_b: Sequence[float],
                           image_size: int | tuple[int, int]) -> np.ndarray:
    """[cx, cy, w, h] of both boxes, centre offset a - b, and both areas; all
    normalised by the image width/height."""
    if isinstance(image_size, int):
        width = height = image_size
    else:
        width, height = image_size

    def geom(b):
        x1, y1, x2, y2 = (float(v) for v in b)
        w, h = (x2 - x1) / width, (y2 - y1) / height
        if w <= 0 or h <= 0:
            raise ValueError(f"zero-area box {tuple(b)}")
        return (x1 + x2) / 2 / width, (y1 + y2) / 2 / height, w, h

    ca, cb = geom(box_a), geom(box_b)
    return np.array([*ca, *cb, ca[0] - cb[0], ca[1] - cb[1], ca[2] * ca[3], cb[2] * cb[3]])


def semantic_embedding(class_id: int, dim: int = 32) -> np.ndarray:
    """Seeded stand-in for a word vector: unit-norm Gaussian draw keyed on class_id."""
    if class_id < 0:
        raise ValueError("class_id must be non-negative")
    v = np.random.default_rng([0x5E3A, int(class_id)]).standard_normal(dim)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# serialisation


def _config_dict(config: DatasetConfig) -> dict:
    d = dataclasses.asdict(config)
    d["novel_class_ids"] = list(config.novel_class_ids)
    return d


def config_hash(config: DatasetConfig) -> str:
    blob = json.dumps(_config_dict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_dataset(ds: SceneDataset, path: str | os.PathLike) -> Path:
    """One directory: ``manifest.json`` + ``frame_XXXXX.npy`` image + ``.json`` sidecar per frame."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(ds.frames):
        np.save(root / f"frame_{i:05d}.npy", f.image, allow_pickle=False)
        side = {
            "nodes": [{"class_id": n.class_id, "role": n.role, "bbox": list(n.bbox)} for n in f.nodes],
            "edges": [{"tissue_idx": e.tissue_idx, "instrument_idx": e.instrument_idx,
                       "interactions": list(e.interactions)} for e in f.edges],
            "caption": list(f.caption),
        }
        (root / f"frame_{i:05d}.json").write_text(json.dumps(side))
    manifest = {
        "seed": ds.seed,
        "config_hash": config_hash(ds.config),
        "config": _config_dict(ds.config),
        "domain": ds.domain,
        "n_frames": len(ds.frames),
        "n_edges": sum(len(f.edges) for f in ds.frames),
        "train_indices": list(ds.train_indices),
        "source_indices": list(ds.source_indices),
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, root / "manifest.json")
    return root


def load_dataset(path: str | os.PathLike) -> SceneDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = dict(manifest["config"])
    cfg["novel_class_ids"] = tuple(cfg["novel_class_ids"])
    config = DatasetConfig(**cfg)
    if config_hash(config) != manifest["config_hash"]:
        raise ValueError(f"dataset manifest at {root} has a mismatched config hash")
    frames = []
    for i in range(manifest["n_frames"]):
        image = np.load(root / f"frame_{i:05d}.npy", allow_pickle=False)
        side = json.loads((root / f"frame_{i:05d}.json").read_text())
        nodes = tuple(Node(n["class_id"], n["role"], tuple(n["bbox"])) for n in side["nodes"])
        edges = tuple(Edge(e["tissue_idx"], e["instrument_idx"], tuple(e["interactions"]))
                      for e in side["edges"])
        frames.append(SceneInstance(image, nodes, edges, tuple(side["caption"])))
    return SceneDataset(tuple(frames), config, manifest["seed"], manifest["domain"],
                        tuple(manifest["train_indices"]), tuple(manifest["source_indices"]))
