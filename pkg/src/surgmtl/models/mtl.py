"""The multi-task model: shared extractor, caption head, scene-graph head and
the expandable classifier used for contrastive pretraining."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..synthdata import PAD, SceneDataset, SceneInstance, encode_spatial_feature, semantic_embedding
from .caption import CaptionTransformer
from .extractor import ClassifierHead, FeatureExtractor, HeadProjection
from .graph import GraphInput, SceneGraphHead

GROUPS = ("shared", "caption", "graph", "classifier")
CURRICULUM_GROUPS = ("shared", "caption", "graph")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    n_node_classes: int
    vocab_size: int
    n_interactions: int
    max_caption_len: int = 16
    image_size: int = 64
    crop_size: int = 32
    stage_channels: tuple[int, ...] = (16, 32, 64)
    d_model: int = 64
    n_heads: int = 2
    n_memory: int = 4
    n_encoder: int = 3
    n_decoder: int = 3
    d_ff: int = 128
    semantic_dim: int = 32
    gat_dim: int = 64
    edge_hidden: int = 64
    attention_norm: str = "destination"
    curriculum_radius: int = 3
    norm_groups: int = 4
    new_row_std: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


def architecture_hash(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedFrame:
    crops: torch.Tensor      # R x C x crop x crop
    boxes: torch.Tensor      # R x 4 (cx, cy, w, h) normalised
    classes: torch.Tensor    # R
    edges: torch.Tensor      # E x 2, local node indices
    spatial: torch.Tensor    # E x 12
    labels: torch.Tensor     # E x K
    caption: torch.Tensor    # max_caption_len, PAD-filled


def crop_node(image: np.ndarray, bbox: Sequence[int], size: int) -> torch.Tensor:
    x1, y1, x2, y2 = bbox
    patch = torch.from_numpy(np.ascontiguousarray(image[y1:y2, x1:x2].transpose(2, 0, 1)))
    return F.interpolate(patch[None], size=(size, size), mode="bilinear", align_corners=False)[0]


def prepare_frame(frame: SceneInstance, image_size: int, crop_size: int, max_caption_len: int,
                  dtype: torch.dtype = torch.float32) -> PreparedFrame:
    crops = torch.stack([crop_node(frame.image, n.bbox, crop_size) for n in frame.nodes]).to(dtype)
    boxes = []
    for n in frame.nodes:
        x1, y1, x2, y2 = n.bbox
        boxes.append([(x1 + x2) / 2 / image_size, (y1 + y2) / 2 / image_size,
                      (x2 - x1) / image_size, (y2 - y1) / image_size])
    spatial = [encode_spatial_feature(frame.nodes[e.tissue_idx].bbox, frame.nodes[e.instrument_idx].bbox,
                                      image_size) for e in frame.edges]
    caption = torch.full((max_caption_len,), PAD, dtype=torch.long)
    caption[: len(frame.caption)] = torch.tensor(frame.caption, dtype=torch.long)
    return PreparedFrame(
        crops=crops,
        boxes=torch.tensor(boxes, dtype=dtype),
        classes=torch.tensor([n.class_id for n in frame.nodes], dtype=torch.long),
        edges=torch.tensor([[e.tissue_idx, e.instrument_idx] for e in frame.edges], dtype=torch.long),
        spatial=torch.tensor(np.array(spatial), dtype=dtype),
        labels=torch.tensor([e.interactions for e in frame.edges], dtype=dtype),
        caption=caption,
    )


def prepare_frames(ds: SceneDataset, crop_size: int = 32,
                   dtype: torch.dtype = torch.float32) -> list[PreparedFrame]:
    c = ds.config
    return [prepare_frame(f, c.image_size, crop_size, c.max_caption_len, dtype) for f in ds.frames]


@dataclass
class SceneBatch:
    crops: torch.Tensor
    boxes: torch.Tensor
    classes: torch.Tensor
    region_index: torch.Tensor  # B x Rmax into the flat node list (0 where padded)
    region_mask: torch.Tensor   # B x Rmax, True = real region
    edges: torch.Tensor         # E x 2, flat node indices
    spatial: torch.Tensor
    labels: torch.Tensor
    edge_frame: torch.Tensor    # E, owning frame of each edge
    tokens: torch.Tensor        # B x L

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def collate(frames: Sequence[PreparedFrame]) -> SceneBatch:
    counts = [f.crops.shape[0] for f in frames]
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).tolist()
    r_max = max(counts)
    region_index = torch.zeros(len(frames), r_max, dtype=torch.long)
    region_mask = torch.zeros(len(frames), r_max, dtype=torch.bool)
    for b, (off, n) in enumerate(zip(offsets, counts)):
        region_index[b, :n] = torch.arange(off, off + n)
        region_mask[b, :n] = True
    return SceneBatch(
        crops=torch.cat([f.crops for f in frames]),
        boxes=torch.cat([f.boxes for f in frames]),
        classes=torch.cat([f.classes for f in frames]),
        region_index=region_index,
        region_mask=region_mask,
        edges=torch.cat([f.edges + off for f, off in zip(frames, offsets)]),
        spatial=torch.cat([f.spatial for f in frames]),
        labels=torch.cat([f.labels for f in frames]),
        edge_frame=torch.cat([torch.full((f.edges.shape[0],), b, dtype=torch.long)
                              for b, f in enumerate(frames)]),
        tokens=torch.stack([f.caption for f in frames]),
    )


# ---------------------------------------------------------------------------
# model


class CaptionHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = HeadProjection(cfg.stage_channels[-1], cfg.d_model, cfg.norm_groups, cfg.curriculum_radius)
        self.box_embed = nn.Linear(4, cfg.d_model)
        self.transformer = CaptionTransformer(cfg.vocab_size, cfg.d_model, cfg.n_heads, cfg.n_memory,
                                              cfg.n_encoder, cfg.n_decoder, cfg.d_ff, cfg.max_caption_len)

    def region_features(self, maps: torch.Tensor, boxes: torch.Tensor,
                        region_index: torch.Tensor, region_mask: torch.Tensor) -> torch.Tensor:
        flat = self.proj(maps) + self.box_embed(boxes)
        return flat[region_index] * region_mask[..., None]


class GraphHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = HeadProjection(cfg.stage_channels[-1], cfg.gat_dim, cfg.norm_groups, cfg.curriculum_radius)
        self.gat = SceneGraphHead(cfg.gat_dim, cfg.semantic_dim, cfg.n_interactions, cfg.gat_dim,
                                  cfg.edge_hidden, cfg.attention_norm)


class MtlModel(nn.Module):
    """Shared extractor (W_sh) feeding a caption head (W_c) and a scene-graph
    head (W_sg); both heads hold a reference to the one extractor instance."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.shared = FeatureExtractor(3, config.stage_channels, config.norm_groups, config.curriculum_radius)
        self.caption_head = CaptionHead(config)
        self.graph_head = GraphHead(config)
        self.classifier_head = ClassifierHead(self.shared.out_dim, config.n_classes)
        table = np.stack([semantic_embedding(c, config.semantic_dim) for c in range(config.n_node_classes)])
        self.register_buffer("semantic_table", torch.from_numpy(table).float())
        # epochs of curriculum each sub-module has been trained under
        self.curriculum_clock = {g: 0 for g in CURRICULUM_GROUPS}

    # -- parameter groups -------------------------------------------------

    def group(self, name: str) -> nn.Module:
        return {"shared": self.shared, "caption": self.caption_head, "graph": self.graph_head,
                "classifier": self.classifier_head}[name]

    def group_parameters(self, name: str) -> list[nn.Parameter]:
        return list(self.group(name).parameters())

    def filters(self) -> dict:
        return {"shared": self.shared.curriculum, "caption": self.caption_head.proj.curriculum,
                "graph": self.graph_head.proj.curriculum}

    def sigma_state(self) -> dict:
        return {g: f.sigma for g, f in self.filters().items()}

    def set_sigma_state(self, state: dict) -> None:
        for g, f in self.filters().items():
            f.set_sigma(state.get(g))

    # -- sub-module operations -------------------------------------------

    def extract_features(self, crops: torch.Tensor) -> torch.Tensor:
        return self.shared(crops)

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier_head(features)

    def caption_forward(self, region_feats: torch.Tensor, target_tokens: torch.Tensor,
                        region_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.caption_head.transformer(region_feats, target_tokens, region_mask)

    def caption_generate(self, region_feats: torch.Tensor, max_len: Optional[int] = None,
                         region_mask: Optional[torch.Tensor] = None, return_logits: bool = False):
        return self.caption_head.transformer.generate(region_feats, max_len, region_mask, return_logits)

    def scenegraph_forward(self, g: GraphInput) -> torch.Tensor:
        return self.graph_head.gat(g)

    # -- batch-level helpers ---------------------------------------------

    def shared_maps(self, batch: SceneBatch) -> torch.Tensor:
        return self.shared.feature_maps(batch.crops)

    def regions(self, batch: SceneBatch, maps: Optional[torch.Tensor] = None) -> torch.Tensor:
        maps = self.shared_maps(batch) if maps is None else maps
        return self.caption_head.region_features(maps, batch.boxes, batch.region_index, batch.region_mask)

    def graph_input(self, batch: SceneBatch, maps: Optional[torch.Tensor] = None) -> GraphInput:
        maps = self.shared_maps(batch) if maps is None else maps
        visual = self.graph_head.proj(maps)
        semantic = self.semantic_table[batch.classes].to(visual.dtype)
        return GraphInput(visual, semantic, batch.spatial, batch.edges)

    def caption_logits(self, batch: SceneBatch, maps: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Teacher-forced logits for predicting tokens[:, 1:] from tokens[:, :-1]."""
        return self.caption_forward(self.regions(batch, maps), batch.tokens[:, :-1], batch.region_mask)

    def edge_logits(self, batch: SceneBatch, maps: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.scenegraph_forward(self.graph_input(batch, maps))

    def forward(self, batch: SceneBatch, tasks: Sequence[str] = ("caption", "graph")) -> dict:
        maps = self.shared_maps(batch)
        out = {}
        if "caption" in tasks:
            out["caption"] = self.caption_logits(batch, maps)
        if "graph" in tasks:
            out["graph"] = self.edge_logits(batch, maps)
        return out

    @torch.no_grad()
    def generate_captions(self, batch: SceneBatch, max_len: Optional[int] = None) -> list[list[int]]:
        return self.caption_generate(self.regions(batch), max_len, batch.region_mask)


def expand_classifier_head(model: MtlModel, n_new: int) -> MtlModel:
    """Append ``n_new`` class rows in place; existing rows and biases are untouched."""
    if n_new <= 0:
        raise ValueError("n_new must be >= 1")
    k_old = model.classifier_head.n_classes
    gen = torch.Generator().manual_seed(model.config.seed * 1000003 + k_old)
    model.classifier_head.expand(n_new, model.config.new_row_std, gen)
    model.config = dataclasses.replace(model.config, n_classes=k_old + n_new)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def _array_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(model: MtlModel, path: str | os.PathLike, **meta: Any) -> Path:
    """Write ``manifest.json`` plus one ``<group>.npz`` per parameter group."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    digests = {}
    for g in GROUPS:
        prefix = {"shared": "shared.", "caption": "caption_head.", "graph": "graph_head.",
                  "classifier": "classifier_head."}[g]
        arrays = {k[len(prefix):]: v.detach().cpu().numpy()
                  for k, v in model.state_dict().items() if k.startswith(prefix)}
        np.savez(root / f"{g}.npz", **arrays)
        digests[g] = _array_digest(arrays)
    manifest = {
        "architecture_hash": architecture_hash(model.config),
        "config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "sigma": model.sigma_state(),
        "curriculum_clock": dict(model.curriculum_clock),
        "group_digests": digests,
        **meta,
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, root / "manifest.json")
    return root


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path: str | os.PathLike, expected: Optional[ModelConfig] = None) -> tuple[MtlModel, dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest in {root}: {exc}") from exc
    config = ModelConfig.from_dict(manifest["config"])
    if architecture_hash(config) != manifest["architecture_hash"]:
        raise CheckpointError(f"architecture hash mismatch in {root}")
    if expected is not None and architecture_hash(expected) != manifest["architecture_hash"]:
        raise CheckpointError("checkpoint architecture differs from the expected model")
    model = MtlModel(config)
    if manifest.get("dtype") == "float64":
        model.double()
    state = {}
    prefixes = {"shared": "shared.", "caption": "caption_head.", "graph": "graph_head.",
                "classifier": "classifier_head."}
    for g in GROUPS:
        with np.load(root / f"{g}.npz", allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        if _array_digest(arrays) != manifest["group_digests"][g]:
            raise CheckpointError(f"parameter digest mismatch for group {g!r} in {root}")
        state.update({prefixes[g] + k: torch.from_numpy(v) for k, v in arrays.items()})
    state["semantic_table"] = model.semantic_table
    model.load_state_dict(state)
    model.set_sigma_state(manifest["sigma"])
    model.curriculum_clock = dict(manifest["curriculum_clock"])
    model.eval()
    return model, manifest
