import json
import math

import numpy as np
import pytest
from PIL import Image

from core.classifier import SparseClassifier, evidence, score
from core.data import load_dataset
from core.errors import ConfigError, ShapeError
from core.explain import (eligible_prototypes, prototype_activation, prototype_gallery, rank_prototypes,
                          render_heatmap, scoring_sheet, sheet_from_presence, topk_prototypes)
from core.prototype_head import ActivationMap, PresenceVector


def _presence(p):
    p = np.asarray(p, dtype=np.float64)
    return PresenceVector(p, [(d % 3, d // 3) for d in range(len(p))])


class TestScoringSheet:
    @pytest.mark.parametrize("seed", range(100))
    def test_decomposition_is_exact(self, seed):
        rng = np.random.default_rng(seed)
        d, k = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        c = SparseClassifier(rng.random((d, k)) * (rng.random((d, k)) < 0.5), reg_order=int(rng.integers(2, 4)))
        presence = _presence(rng.random(d))
        sheet = sheet_from_presence(presence, c)
        e = evidence(presence.p, c)
        for j, line in enumerate(sheet.classes):
            summed = sum(p.contributions[line.name] for p in sheet.prototypes)
            assert summed == pytest.approx(line.evidence, abs=1e-9)
            assert line.evidence == pytest.approx(e[j], abs=1e-9)
            assert line.score == pytest.approx(math.log(line.evidence ** c.reg_order + 1), abs=1e-9)
        assert sheet.prediction == c.class_names[int(np.argmax(score(presence, c)))]

    def test_zero_presence(self):
        c = SparseClassifier(np.random.default_rng(0).random((4, 2)))
        sheet = sheet_from_presence(_presence(np.zeros(4)), c)
        assert all(line.evidence == 0.0 and line.score == 0.0 for line in sheet.classes)
        assert all(v == 0.0 for p in sheet.prototypes for v in p.contributions.values())

    def test_single_active_prototype(self):
        c = SparseClassifier(np.array([[0.5], [0.3]]), class_names=["lesion"])
        sheet = sheet_from_presence(_presence([1.0, 0.0]), c)
        assert sheet.classes[0].evidence == pytest.approx(0.5)
        assert sheet.classes[0].score == pytest.approx(math.log(1.25))

    def test_json_layout(self, tmp_path):
        c = SparseClassifier(np.array([[0.5, 0.0], [0.2, 0.4]]), class_names=["a", "b"])
        presence = PresenceVector(np.array([0.9, 0.3]), [(1, 2), (0, 0)])
        path = sheet_from_presence(presence, c).to_json(tmp_path / "sheet.json")
        data = json.loads(path.read_text())
        assert set(data) == {"prediction", "reg_order", "classes", "prototypes"}
        assert data["prototypes"][0]["location"] == [2, 1]
        assert data["prototypes"][0]["contributions"] == {"a": pytest.approx(0.45), "b": 0.0}
        assert data["prediction"] == "a"

    @pytest.mark.parametrize("seed", range(5))
    def test_model_sheet_matches_model_scores(self, make_model, seed):
        model = make_model(seed=seed)
        image = np.random.default_rng(seed).random((32, 32)).astype(np.float32)
        sheet = scoring_sheet(model, image)
        scores = model.analyse(image).scores
        assert [line.score for line in sheet.classes] == pytest.approx(scores.tolist(), rel=1e-4, abs=1e-5)


class TestTopK:
    def test_only_eligible_prototypes(self):
        weights = np.zeros((6, 2))
        weights[[1, 3, 4], 0] = [0.2, 0.5, 0.0005]
        weights[5, 1] = 0.3
        c = SparseClassifier(weights)
        assert eligible_prototypes(c).tolist() == [1, 3, 5]
        hits = rank_prototypes(_presence(np.linspace(0.1, 0.6, 6)), c, k=5)
        assert [h.prototype for h in hits] == [5, 3, 1]

    def test_k_one_is_the_most_present(self):
        c = SparseClassifier(np.ones((4, 1)))
        assert rank_prototypes(_presence([0.2, 0.9, 0.4, 0.1]), c, 1)[0].prototype == 1

    def test_ties_by_id(self):
        c = SparseClassifier(np.ones((3, 1)))
        assert [h.prototype for h in rank_prototypes(_presence([0.5, 0.5, 0.5]), c, 3)] == [0, 1, 2]

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigError):
            rank_prototypes(_presence([0.5]), SparseClassifier(np.ones((1, 1))), 0)

    def test_hit_carries_weights_and_location(self):
        c = SparseClassifier(np.array([[0.2, 0.7]]), class_names=["x", "y"])
        hit, = rank_prototypes(PresenceVector(np.array([0.4]), [(2, 1)]), c, 1)
        assert hit.location == (2, 1)
        assert hit.weights == {"x": pytest.approx(0.2), "y": pytest.approx(0.7)}

    def test_model_topk(self, make_model):
        model = make_model(density=1.0)
        image = np.random.default_rng(0).random((32, 32)).astype(np.float32)
        hits = topk_prototypes(model, image, 5)
        assert len(hits) == 5
        assert all(a.presence >= b.presence for a, b in zip(hits, hits[1:]))


class TestHeatmap:
    @pytest.fixture
    def image(self):
        return np.random.default_rng(0).random((12, 10))

    def _read(self, path):
        with Image.open(path) as img:
            assert img.mode == "RGB"
            return np.asarray(img)

    def test_zero_map_keeps_the_image(self, tmp_path, image):
        out = self._read(render_heatmap(image, ActivationMap(0, np.zeros((12, 10))), tmp_path / "h.png"))
        gray = np.round(image * 255).astype(np.uint8)
        for channel in range(3):
            np.testing.assert_array_equal(out[:, :, channel], gray)

    def test_constant_map_on_constant_image_is_uniform(self, tmp_path):
        path = render_heatmap(np.full((8, 8), 0.5), ActivationMap(0, np.ones((8, 8))), tmp_path / "h.png")
        out = self._read(path)
        assert np.all(out == out[0, 0])

    def test_deterministic(self, tmp_path, image):
        amap = ActivationMap(0, np.random.default_rng(1).random((12, 10)))
        a = render_heatmap(image, amap, tmp_path / "a.png").read_bytes()
        b = render_heatmap(image, amap, tmp_path / "b.png").read_bytes()
        assert a == b

    def test_size_mismatch(self, tmp_path, image):
        with pytest.raises(ShapeError):
            render_heatmap(image, ActivationMap(0, np.zeros((10, 12))), tmp_path / "h.png")

    def test_model_activation_uses_image_size(self, make_model):
        image = np.random.default_rng(0).random((24, 40)).astype(np.float32)
        amap = prototype_activation(make_model(), image, 3)
        assert amap.size == (40, 24)
        assert amap.raster.min() >= 0.0 and amap.raster.max() <= 1.0


class TestGallery:
    def test_sorted_by_presence(self, make_model, tiny_dataset_dir):
        ds = load_dataset(tiny_dataset_dir, "val")
        entries = prototype_gallery(make_model(), ds, d=2, k=3)
        assert len(entries) == 3
        assert all(a.presence >= b.presence for a, b in zip(entries, entries[1:]))
        for entry in entries:
            x0, y0, x1, y1 = entry.patch_box
            assert (x1 - x0, y1 - y0) == (8, 8)
            assert entry.path.startswith("val/")

    def test_prototype_out_of_range(self, make_model, tiny_dataset_dir):
        with pytest.raises(IndexError):
            prototype_gallery(make_model(), load_dataset(tiny_dataset_dir, "val"), d=8)
