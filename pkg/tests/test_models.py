import json

import numpy as np
import pytest
import torch

from surgmtl.curriculum import log_kernel
from surgmtl.losses import caption_ce_loss, interaction_ml_loss
from surgmtl.models import (
    CheckpointError,
    ModelConfig,
    MtlModel,
    collate,
    expand_classifier_head,
    load_checkpoint,
    prepare_frames,
    save_checkpoint,
)
from surgmtl.models.caption import CaptionTransformer
from surgmtl.models.extractor import FeatureExtractor
from surgmtl.models.graph import GraphInput, SceneGraphHead
from surgmtl.synthdata import BOS, EOS, PAD, DatasetConfig, Vocabulary, generate_dataset

DATA = DatasetConfig(n_frames=6)


def small_config(**kw) -> ModelConfig:
    base = dict(n_classes=DATA.n_classes, n_node_classes=DATA.n_classes, vocab_size=len(Vocabulary.for_config(DATA)),
                n_interactions=DATA.n_interactions, max_caption_len=DATA.max_caption_len, crop_size=16,
                stage_channels=(8, 8, 16), d_model=16, n_heads=2, n_memory=2, n_encoder=2, n_decoder=2,
                d_ff=32, semantic_dim=8, gat_dim=16, edge_hidden=16, curriculum_radius=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def frames():
    return prepare_frames(generate_dataset(DATA, 0), 16, torch.float64)


@pytest.fixture()
def model():
    torch.manual_seed(0)
    return MtlModel(small_config()).double().eval()


def random_graph(n_instr, gen, dv=6, ds=4):
    v = 1 + n_instr
    edges = torch.stack([torch.zeros(n_instr, dtype=torch.long), torch.arange(1, v)], dim=1)
    return GraphInput(torch.randn(v, dv, generator=gen, dtype=torch.float64),
                      torch.randn(v, ds, generator=gen, dtype=torch.float64),
                      torch.randn(n_instr, 12, generator=gen, dtype=torch.float64), edges)


class TestExtractor:
    def test_shape(self):
        ext = FeatureExtractor(3, (8, 8, 16)).eval()
        for n in (1, 3):
            assert ext(torch.rand(n, 3, 16, 16)).shape == (n, 16)

    def test_identical_crops(self):
        ext = FeatureExtractor(3, (8, 8, 16)).eval()
        x = torch.rand(1, 3, 16, 16).repeat(2, 1, 1, 1)
        out = ext(x)
        torch.testing.assert_close(out[0], out[1], rtol=0, atol=0)

    def test_identity_curriculum_matches_disabled(self):
        ext = FeatureExtractor(3, (8, 8, 16)).eval()
        x = torch.rand(2, 3, 32, 32)
        ext.curriculum.set_sigma(None)
        a = ext(x)
        ext.curriculum.set_kernel(log_kernel(1.0, 3))
        b = ext(x)
        ext.curriculum.set_kernel(None)
        c = ext(x)
        assert torch.equal(a, c) and not torch.equal(a, b)

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            FeatureExtractor(3, (8, 8, 16))(torch.rand(1, 1, 16, 16))


class TestClassifier:
    def test_zero_features_give_bias(self, model):
        with torch.no_grad():
            model.classifier_head.bias.copy_(torch.arange(DATA.n_classes, dtype=torch.float64))
        out = model.classify(torch.zeros(2, model.shared.out_dim, dtype=torch.float64))
        np.testing.assert_array_equal(out.detach().numpy(), np.tile(np.arange(DATA.n_classes), (2, 1)))

    def test_affine(self, model):
        g = torch.Generator().manual_seed(1)
        a, b = (torch.randn(3, 16, generator=g, dtype=torch.float64) for _ in range(2))
        bias = model.classifier_head.bias
        lhs = model.classify(2 * a + 3 * b) - bias
        rhs = 2 * (model.classify(a) - bias) + 3 * (model.classify(b) - bias)
        torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-12)

    def test_expand_shape_and_old_rows(self, frames):
        m = MtlModel(small_config(n_classes=6)).double().eval()
        crops = collate(frames[:3]).crops
        with torch.no_grad():
            before = m.classify(m.extract_features(crops))
            expand_classifier_head(m, 2)
            after = m.classify(m.extract_features(crops))
        assert m.classifier_head.n_classes == 8 and m.config.n_classes == 8
        assert torch.equal(after[:, :6], before)

    def test_expand_twice_equals_once(self, frames):
        crops = collate(frames[:2]).crops
        a, b = MtlModel(small_config(n_classes=6)).double(), MtlModel(small_config(n_classes=6)).double()
        expand_classifier_head(a, 2)
        expand_classifier_head(expand_classifier_head(b, 1), 1)
        with torch.no_grad():
            la, lb = a.classify(a.extract_features(crops)), b.classify(b.extract_features(crops))
        assert torch.equal(la[:, :6], lb[:, :6])

    def test_expand_rejects_nonpositive(self, model):
        with pytest.raises(ValueError):
            expand_classifier_head(model, 0)


class TestCaption:
    def make(self):
        torch.manual_seed(3)
        return CaptionTransformer(20, 16, 2, 2, 2, 2, 32, 10).double().eval()

    def test_shape_and_causality(self):
        tf = self.make()
        g = torch.Generator().manual_seed(0)
        regions = torch.randn(2, 4, 16, generator=g, dtype=torch.float64)
        tokens = torch.randint(4, 20, (2, 8), generator=g)
        logits = tf(regions, tokens)
        assert logits.shape == (2, 8, 20)
        for t in range(7):
            perturbed = tokens.clone()
            perturbed[:, t + 1:] = torch.randint(4, 20, (2, 7 - t), generator=g)
            torch.testing.assert_close(tf(regions, perturbed)[:, :t + 1], logits[:, :t + 1], rtol=0, atol=0)

    def test_region_permutation_invariance(self):
        tf = self.make()
        g = torch.Generator().manual_seed(1)
        regions = torch.randn(1, 5, 16, generator=g, dtype=torch.float64)
        tokens = torch.randint(4, 20, (1, 6), generator=g)
        perm = torch.tensor([3, 0, 4, 2, 1])
        torch.testing.assert_close(tf(regions[:, perm], tokens), tf(regions, tokens), rtol=0, atol=1e-12)

    def test_padded_regions_ignored(self):
        tf = self.make()
        g = torch.Generator().manual_seed(2)
        regions = torch.randn(1, 3, 16, generator=g, dtype=torch.float64)
        tokens = torch.randint(4, 20, (1, 5), generator=g)
        padded = torch.cat([regions, torch.randn(1, 2, 16, generator=g, dtype=torch.float64)], dim=1)
        mask = torch.tensor([[True, True, True, False, False]])
        torch.testing.assert_close(tf(padded, tokens, mask), tf(regions, tokens), rtol=0, atol=1e-12)

    def test_generation_contract_and_step_logits(self):
        tf = self.make()
        g = torch.Generator().manual_seed(3)
        regions = torch.randn(3, 2, 16, generator=g, dtype=torch.float64)
        seqs, steps = tf.generate(regions, return_logits=True)
        assert seqs == tf.generate(regions)
        for b, seq in enumerate(seqs):
            assert seq[0] == BOS
            assert seq[-1] == EOS or len(seq) == 10
            assert PAD not in seq and BOS not in seq[1:]
            prefix = torch.tensor([seq[:-1]])
            forced = tf(regions[b:b + 1], prefix)[0]
            for t in range(prefix.shape[1]):
                torch.testing.assert_close(steps[t][b], forced[t], rtol=0, atol=1e-10)

    def test_too_long(self):
        with pytest.raises(ValueError):
            self.make()(torch.zeros(1, 2, 16, dtype=torch.float64), torch.ones(1, 11, dtype=torch.long))


class TestGraph:
    @pytest.mark.parametrize("n_instr", [1, 2, 5])
    def test_shape(self, n_instr):
        head = SceneGraphHead(6, 4, 5, 16, 16).double()
        assert head(random_graph(n_instr, torch.Generator().manual_seed(n_instr))).shape == (n_instr, 5)

    @pytest.mark.parametrize("norm", ["destination", "pair"])
    def test_permutation_equivariance(self, norm):
        torch.manual_seed(0)
        head = SceneGraphHead(6, 4, 5, 16, 16, norm).double()
        g = random_graph(4, torch.Generator().manual_seed(0))
        out = head(g)
        node_perm = torch.tensor([3, 0, 4, 1, 2])       # new position -> old node
        inv = torch.argsort(node_perm)                    # old node -> new position
        edge_perm = torch.tensor([2, 0, 3, 1])
        pg = GraphInput(g.visual[node_perm], g.semantic[node_perm], g.spatial[edge_perm], inv[g.edges[edge_perm]])
        torch.testing.assert_close(head(pg), out[edge_perm], rtol=0, atol=1e-12)

    def test_duplicate_node_pair_vs_destination(self):
        g = random_graph(2, torch.Generator().manual_seed(5))
        dup = GraphInput(torch.cat([g.visual, g.visual[2:3]]), torch.cat([g.semantic, g.semantic[2:3]]),
                         torch.cat([g.spatial, g.spatial[1:2]]), torch.cat([g.edges, torch.tensor([[0, 3]])]))
        torch.manual_seed(1)
        pair = SceneGraphHead(6, 4, 5, 16, 16, "pair").double()
        torch.testing.assert_close(pair(dup)[:2], pair(g), rtol=0, atol=1e-12)
        torch.manual_seed(1)
        dest = SceneGraphHead(6, 4, 5, 16, 16, "destination").double()
        # a tissue node normalises over all its instruments, so a new neighbour moves old edges
        assert (dest(dup)[:2] - dest(g)).abs().max() > 1e-6

    def test_rejects_empty_graph(self):
        head = SceneGraphHead(6, 4, 5)
        g = GraphInput(torch.zeros(2, 6), torch.zeros(2, 4), torch.zeros(0, 12), torch.zeros(0, 2, dtype=torch.long))
        with pytest.raises(ValueError):
            head(g)

    def test_unknown_norm(self):
        with pytest.raises(ValueError):
            SceneGraphHead(6, 4, 5, attention_norm="edge")


class TestMtlModel:
    def test_forward_shapes(self, model, frames):
        batch = collate(frames[:4])
        out = model(batch)
        assert out["caption"].shape == (4, DATA.max_caption_len - 1, model.config.vocab_size)
        assert out["graph"].shape == (batch.edges.shape[0], DATA.n_interactions)

    def test_group_disjointness(self, model):
        ids = {g: {id(p) for p in model.group_parameters(g)} for g in ("shared", "caption", "graph", "classifier")}
        names = list(ids)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                assert not ids[a] & ids[b]
        assert sum(map(len, ids.values())) == len(list(model.parameters()))

    def test_cross_task_gradients_are_zero(self, model, frames):
        batch = collate(frames[:3])
        model.zero_grad()
        caption_ce_loss(model.caption_logits(batch), batch.tokens[:, 1:]).backward()
        assert all(p.grad is None or not p.grad.any() for p in model.group_parameters("graph"))
        assert any(p.grad is not None and p.grad.any() for p in model.group_parameters("shared"))
        model.zero_grad()
        interaction_ml_loss(model.edge_logits(batch), batch.labels).backward()
        assert all(p.grad is None or not p.grad.any() for p in model.group_parameters("caption"))

    def test_eval_determinism(self, model, frames):
        batch = collate(frames)
        a, b = model(batch), model(batch)
        assert torch.equal(a["caption"], b["caption"]) and torch.equal(a["graph"], b["graph"])
        assert model.generate_captions(batch) == model.generate_captions(batch)

    def test_end_to_end_finite_differences(self, model, frames):
        batch = collate(frames[:2])
        for f in model.filters().values():
            f.set_sigma(1.0)

        def loss():
            out = model(batch)
            return caption_ce_loss(out["caption"], batch.tokens[:, 1:]) + interaction_ml_loss(out["graph"], batch.labels)

        model.zero_grad()
        loss().backward()
        rng = np.random.default_rng(0)
        eps = 1e-6
        for g in ("shared", "caption", "graph"):
            params = [p for p in model.group_parameters(g) if p.grad is not None]
            for _ in range(6):
                p = params[rng.integers(len(params))]
                idx = tuple(int(rng.integers(s)) for s in p.shape)
                with torch.no_grad():
                    orig = p[idx].item()
                    p[idx] = orig + eps
                    up = loss().item()
                    p[idx] = orig - eps
                    down = loss().item()
                    p[idx] = orig
                numeric, analytic = (up - down) / (2 * eps), p.grad[idx].item()
                assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-4)

    def test_variable_region_counts(self, model):
        ds = generate_dataset(DatasetConfig(n_frames=12, max_instruments=3), 9)
        frames = prepare_frames(ds, 16, torch.float64)
        counts = {f.crops.shape[0] for f in frames}
        assert len(counts) > 1
        out = model(collate(frames))
        assert torch.isfinite(out["caption"]).all() and torch.isfinite(out["graph"]).all()


class TestCheckpoint:
    def test_round_trip(self, model, frames, tmp_path):
        model.filters()["caption"].set_sigma(0.81)
        model.curriculum_clock["caption"] = 7
        path = save_checkpoint(model, tmp_path / "ck", stage="test")
        back, manifest = load_checkpoint(path, expected=model.config)
        assert manifest["stage"] == "test"
        assert back.sigma_state() == model.sigma_state()
        assert back.curriculum_clock == model.curriculum_clock
        batch = collate(frames)
        assert torch.equal(back(batch)["graph"], model(batch)["graph"])

    def test_corrupted_group(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "ck")
        with np.load(path / "graph.npz") as data:
            arrays = {k: data[k].copy() for k in data.files}
        key = sorted(arrays)[0]
        arrays[key].flat[0] += 1.0
        np.savez(path / "graph.npz", **arrays)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_architecture_mismatch(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "ck")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected=small_config(d_model=32))
        m = json.loads((path / "manifest.json").read_text())
        m["config"]["gat_dim"] = 8
        (path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nothing")
