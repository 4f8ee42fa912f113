import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dab import persist
from dab.datasets import Normalization, gen_blobs
from dab.model import DabConfig, init_model, score, train
from dab.persist import ModelFormatError


@pytest.fixture(scope="module")
def trained():
    tr, te, _ = gen_blobs(0, [[0, 0], [3, 0]], 1.0, 30, [10, 10], 2)
    cfg = DabConfig(task="classification", num_classes=2, k=2, latent_dim=2,
                    encoder_hidden=[6], epochs=3, batch_size=16, gamma=0.9)
    model, _ = train(tr, cfg)
    return model, te


class TestRoundTrip:
    def test_bytes_identical(self, trained, tmp_path):
        model, _ = trained
        first = persist.save(model, tmp_path / "a.dabk")
        second = persist.save(persist.load(first), tmp_path / "b.dabk")
        assert first.read_bytes() == second.read_bytes()

    def test_predictions_identical(self, trained, tmp_path):
        model, te = trained
        loaded = persist.load(persist.save(model, tmp_path / "m.dabk"))
        p0, u0 = score(model, te.features)
        p1, u1 = score(loaded, te.features)
        np.testing.assert_array_equal(p0, p1)
        assert u0.tobytes() == u1.tobytes()

    def test_normalization_kept(self):
        m = init_model(2, DabConfig(k=1, latent_dim=2, encoder_hidden=[3]))
        m.normalization = Normalization(np.array([1.0, -2.0]), np.array([0.5, 3.0]))
        back = persist.from_bytes(persist.to_bytes(m))
        np.testing.assert_array_equal(back.normalization.std, [0.5, 3.0])

    def test_sidecar(self, trained, tmp_path):
        persist.save(trained[0], tmp_path / "m.dabk")
        meta = json.loads((tmp_path / "m.dabk.json").read_text())
        assert meta["config"]["k"] == 2 and meta["input_dim"] == 2


class TestCorruption:
    @pytest.fixture()
    def blob(self):
        return persist.to_bytes(init_model(2, DabConfig(k=2, latent_dim=2, encoder_hidden=[3])))

    def test_magic(self, blob):
        with pytest.raises(ModelFormatError, match="magic"):
            persist.from_bytes(b"XXXX" + blob[4:])

    def test_version(self, blob):
        with pytest.raises(ModelFormatError, match="version 9"):
            persist.from_bytes(blob[:4] + (9).to_bytes(4, "little") + blob[8:])

    def test_trailing(self, blob):
        with pytest.raises(ModelFormatError, match="trailing"):
            persist.from_bytes(blob + b"\0")

    @settings(max_examples=40, deadline=None)
    @given(cut=st.integers(min_value=0, max_value=10_000))
    def test_any_truncation_rejected(self, cut):
        blob = persist.to_bytes(init_model(2, DabConfig(k=2, latent_dim=2, encoder_hidden=[3])))
        with pytest.raises(ModelFormatError):
            persist.from_bytes(blob[:cut % len(blob)])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFormatError, match="cannot read"):
            persist.load(tmp_path / "absent.dabk")
