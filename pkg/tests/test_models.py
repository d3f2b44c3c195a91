import numpy as np
import pytest

from bubbleattack.models import (CheckpointCompatibilityError, CheckpointFormatError, CheckpointMeta, DenoiserModel,
                                 LinearSvmModel, SimpleCnnModel, cnn_confidence, denoise, load_checkpoint, predict,
                                 save_checkpoint, svm_confidence)
from bubbleattack.tensor import Tensor


def test_parameter_counts():
    assert LinearSvmModel().parameter_count() == 2001
    assert SimpleCnnModel().parameter_count() == 28818


def test_svm_wrapper_logits():
    m = LinearSvmModel()
    x = Tensor(np.ones((1, 40, 50)))
    assert np.array_equal(m.logits(x).data, [[1.0, 0.0]])
    m.params["weights"][:] = 1 / 2000
    assert np.allclose(m.logits(x).data, [[0.0, 1.0]], atol=1e-15)


def test_svm_score_matches_dot_product():
    rng = np.random.default_rng(0)
    m = LinearSvmModel()
    m.params["weights"] = rng.normal(size=2000)
    m.params["bias"] = rng.normal(size=1)
    img = rng.uniform(size=(40, 50))
    p = float(img.reshape(-1) @ m.params["weights"] + m.params["bias"][0])
    z = m.logits(Tensor(img[None])).data[0]
    assert np.array_equal(z, [1.0 - p, p])
    conf = svm_confidence(m, img)[0]
    assert conf[1] == pytest.approx(1 / (1 + np.exp((1 - p) - p)), rel=1e-12)


def test_cnn_zero_weights_give_half():
    m = SimpleCnnModel()
    for k in m.params:
        m.params[k][:] = 0
    assert np.array_equal(cnn_confidence(m, np.full((40, 50), 0.3)), [[0.5, 0.5]])


def test_cnn_eval_is_deterministic_and_shaped():
    m = SimpleCnnModel(seed=3)
    img = np.random.default_rng(1).uniform(size=(40, 50))
    a, b = cnn_confidence(m, img), cnn_confidence(m, img)
    assert a.shape == (1, 2) and np.array_equal(a, b)
    t = cnn_confidence(m, img, training=True, rng=np.random.default_rng(0))
    assert t.shape == (1, 2)


def test_predict_ties_go_to_mark():
    m = LinearSvmModel()
    m.params["bias"][:] = 0.5  # p = 1/2 gives equal logits
    assert predict(m, np.zeros((3, 40, 50))).tolist() == [0, 0, 0]


def test_denoiser_shapes_and_clip():
    m = DenoiserModel(seed=0)
    x = np.random.default_rng(2).uniform(size=(3, 40, 50))
    assert m.raw_decode(Tensor(x)).shape == (3, 1, 42, 50)
    out = denoise(m, x)
    assert out.shape == (3, 40, 50)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert denoise(m, x[0]).shape == (40, 50)


def test_checkpoint_roundtrip(tmp_path):
    m = SimpleCnnModel(seed=7)
    p = tmp_path / "m.bblm"
    save_checkpoint(m, p, CheckpointMeta("synthetic", 7, 3, {"note": "x"}))
    back, meta = load_checkpoint(p, SimpleCnnModel)
    assert np.array_equal(back.flat(), m.flat())
    assert meta.epoch == 3 and meta.extra == {"note": "x"}


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "m.bblm"
    save_checkpoint(LinearSvmModel(), p)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(CheckpointFormatError, match="offset"):
        load_checkpoint(p)


def test_checkpoint_corruption_and_magic(tmp_path):
    p = tmp_path / "m.bblm"
    save_checkpoint(LinearSvmModel(), p)
    raw = bytearray(p.read_bytes())
    raw[-20] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="CRC"):
        load_checkpoint(p)
    p.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_tag_mismatch(tmp_path):
    p = tmp_path / "svm.bblm"
    save_checkpoint(LinearSvmModel(), p)
    with pytest.raises(CheckpointCompatibilityError):
        load_checkpoint(p, SimpleCnnModel)
