import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgmtl.synthdata import (
    BOS,
    EOS,
    PAD,
    UNK,
    DatasetConfig,
    DomainShiftSpec,
    Vocabulary,
    apply_intensity_shift,
    encode_spatial_feature,
    generate_dataset,
    hue_rotation_matrix,
    interaction_name,
    load_dataset,
    save_dataset,
    semantic_embedding,
    split_domains,
    train_val_split,
)

NOVEL = DatasetConfig(n_frames=60, n_classes=10, novel_class_ids=(8, 9), novel_frame_fraction=0.25)


def assert_same_dataset(a, b):
    assert len(a) == len(b)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.image, fb.image)
        assert fa.nodes == fb.nodes and fa.edges == fb.edges and fa.caption == fb.caption


class TestGenerate:
    def test_deterministic(self):
        cfg = DatasetConfig(n_frames=4)
        assert_same_dataset(generate_dataset(cfg, 7), generate_dataset(cfg, 7))

    def test_seed_changes_images(self):
        cfg = DatasetConfig(n_frames=2)
        assert not np.array_equal(generate_dataset(cfg, 1).frames[0].image, generate_dataset(cfg, 2).frames[0].image)

    def test_one_tissue_node(self):
        ds = generate_dataset(DatasetConfig(n_frames=20, n_classes=4, n_tissue_classes=1), 3)
        for f in ds.frames:
            roles = [n.role for n in f.nodes]
            assert roles.count("tissue") == 1
            assert roles.count("instrument") >= 1

    def test_every_interaction_covered(self):
        ds = generate_dataset(DatasetConfig(n_frames=64, n_interactions=5), 7)
        counts = np.zeros(5, dtype=int)
        for f in ds.frames:
            for e in f.edges:
                counts += np.array(e.interactions)
        assert (counts >= 1).all()

    def test_frame_invariants(self):
        cfg = DatasetConfig(n_frames=40)
        ds = generate_dataset(cfg, 11)
        s = cfg.image_size
        for f in ds.frames:
            assert f.image.shape == (s, s, 3)
            assert f.image.min() >= 0.0 and f.image.max() <= 1.0
            for n in f.nodes:
                x1, y1, x2, y2 = n.bbox
                assert 0 <= x1 < x2 <= s and 0 <= y1 < y2 <= s
                assert 0 <= n.class_id < cfg.n_classes
            for e in f.edges:
                assert f.nodes[e.tissue_idx].role == "tissue"
                assert f.nodes[e.instrument_idx].role == "instrument"
                assert len(e.interactions) == cfg.n_interactions
            assert f.caption[0] == BOS and f.caption[-1] == EOS
            assert len(f.caption) <= cfg.max_caption_len

    def test_caption_interactions_are_edge_labels(self):
        cfg = DatasetConfig(n_frames=30)
        ds = generate_dataset(cfg, 5)
        vocab = ds.vocab
        names = {interaction_name(k): k for k in range(cfg.n_interactions)}
        for f in ds.frames:
            set_bits = {k for e in f.edges for k, v in enumerate(e.interactions) if v}
            for w in vocab.decode(f.caption):
                if w in names:
                    assert names[w] in set_bits

    def test_caption_template(self):
        ds = generate_dataset(DatasetConfig(n_frames=3), 0)
        words = ds.vocab.decode(ds.frames[0].caption)
        assert words[1:3] == ["is", "being"] and words[4] == "by"

    @pytest.mark.parametrize("kwargs", [dict(n_classes=1), dict(n_frames=0), dict(image_size=16),
                                        dict(novel_class_ids=(3,)), dict(max_caption_len=5)])
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            generate_dataset(DatasetConfig(**kwargs), 0)


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary.for_config(DatasetConfig())
        assert [v.stoi[w] for w in ("<pad>", "<bos>", "<eos>", "<unk>")] == [PAD, BOS, EOS, UNK]

    def test_bijective(self):
        v = Vocabulary.for_config(NOVEL)
        assert len(set(v.itos)) == len(v)
        assert all(v.stoi[w] == i for i, w in enumerate(v.itos))
        assert v.decode(v.encode(["kidney", "is", "being"])) == ["kidney", "is", "being"]

    def test_unknown_word(self):
        assert Vocabulary(["a"]).encode(["zzz"]) == [UNK]


class TestDomainShift:
    def test_identity_shift_keeps_images(self):
        ds = generate_dataset(DatasetConfig(n_frames=20), 2)
        sd, td = split_domains(ds, DomainShiftSpec(), 0)
        for f, src in zip(td.frames, td.source_indices):
            np.testing.assert_array_equal(f.image, ds.frames[src].image)
        assert set(sd.source_indices).isdisjoint(td.source_indices)

    def test_novel_classes_only_in_target(self):
        ds = generate_dataset(NOVEL, 4)
        sd, td = split_domains(ds, DomainShiftSpec(0.1, 0.9, 20.0, (8, 9)), 4)
        assert not sd.class_set() & {8, 9}
        assert td.class_set() == sd.class_set() | {8, 9}

    def test_contrast_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.random((6, 5, 3))
        out = apply_intensity_shift(img, DomainShiftSpec(contrast_scale=1.5))
        expected = np.empty_like(img)
        for idx in np.ndindex(img.shape):
            expected[idx] = min(1.0, max(0.0, 0.5 + 1.5 * (img[idx] - 0.5)))
        np.testing.assert_array_equal(out, expected)

    def test_hue_rotation_preserves_grey(self):
        m = hue_rotation_matrix(37.0)
        np.testing.assert_allclose(m @ np.ones(3), np.ones(3), atol=1e-15)
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(hue_rotation_matrix(120.0) @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)

    @pytest.mark.parametrize("fraction", [0.1, 0.33, 0.5, 1.0])
    def test_train_split_size(self, fraction):
        ds = generate_dataset(NOVEL, 1)
        _, td = split_domains(ds, DomainShiftSpec(novel_class_ids=(8, 9), td_train_fraction=fraction), 1)
        assert len(td.train_split()) == math.ceil(fraction * len(td))
        assert len(td.train_split()) + len(td.eval_split()) == len(td)

    def test_empty_target_rejected(self):
        ds = generate_dataset(DatasetConfig(n_frames=10), 0)
        with pytest.raises(ValueError):
            split_domains(ds, DomainShiftSpec(base_share=0.0), 0)

    def test_invalid_shift(self):
        ds = generate_dataset(DatasetConfig(n_frames=10), 0)
        with pytest.raises(ValueError):
            split_domains(ds, DomainShiftSpec(contrast_scale=0.0), 0)

    def test_train_val_split_partitions(self):
        ds = generate_dataset(DatasetConfig(n_frames=12), 0)
        tr, va = train_val_split(ds, 0.25, 3)
        assert len(va) == 3
        assert sorted(tr.source_indices + va.source_indices) == list(range(12))


class TestSpatialFeature:
    def test_identical_boxes(self):
        v = encode_spatial_feature((3, 4, 10, 12), (3, 4, 10, 12), 32)
        assert v[8] == 0.0 and v[9] == 0.0

    def test_full_image_box(self):
        v = encode_spatial_feature((0, 0, 64, 64), (0, 0, 64, 64), 64)
        np.testing.assert_array_equal(v[:4], [0.5, 0.5, 1.0, 1.0])
        assert v[10] == 1.0

    def test_hand_example(self):
        v = encode_spatial_feature((0, 0, 64, 64), (64, 64, 128, 128), 128)
        np.testing.assert_allclose(v, [0.25, 0.25, 0.5, 0.5, 0.75, 0.75, 0.5, 0.5, -0.5, -0.5, 0.25, 0.25])

    def test_zero_area_rejected(self):
        with pytest.raises(ValueError):
            encode_spatial_feature((1, 1, 1, 5), (0, 0, 4, 4), 32)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 31), min_size=4, max_size=4), st.lists(st.integers(0, 31), min_size=4, max_size=4))
    def test_swap_negates_offset(self, a, b):
        a = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]) + 1, max(a[1], a[3]) + 1)
        b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]) + 1, max(b[1], b[3]) + 1)
        ab, ba = encode_spatial_feature(a, b, 32), encode_spatial_feature(b, a, 32)
        np.testing.assert_array_equal(ab[8:10], -ba[8:10])
        np.testing.assert_array_equal(ab[:4], ba[4:8])


class TestSemanticEmbedding:
    def test_deterministic_unit(self):
        a, b = semantic_embedding(3, 16), semantic_embedding(3, 16)
        np.testing.assert_array_equal(a, b)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-9

    def test_distinct_classes(self):
        assert float(semantic_embedding(0) @ semantic_embedding(1)) < 0.99

    def test_negative_class(self):
        with pytest.raises(ValueError):
            semantic_embedding(-1)


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        ds = generate_dataset(NOVEL, 8)
        _, td = split_domains(ds, DomainShiftSpec(0.1, 0.9, 20.0, (8, 9)), 8)
        back = load_dataset(save_dataset(td, tmp_path / "td"))
        assert_same_dataset(td, back)
        assert back.train_indices == td.train_indices and back.domain == "TD"
        assert back.config == td.config and back.source_indices == td.source_indices

    def test_hash_mismatch_detected(self, tmp_path):
        import json

        root = save_dataset(generate_dataset(DatasetConfig(n_frames=2), 0), tmp_path / "d")
        m = json.loads((root / "manifest.json").read_text())
        m["config"]["n_interactions"] = 4
        (root / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValueError):
            load_dataset(root)
