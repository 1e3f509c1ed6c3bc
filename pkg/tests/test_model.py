import numpy as np
import pytest

import jdl.autodiff as ad
from jdl.autodiff import Tensor
from jdl.errors import OddDim, ShapeMismatch
from jdl.model import (JointModel, UNetConfig, classify, denoise_forward,
                       feature_pool_kernel, time_embedding)

SMALL = UNetConfig(base_channels=8, channel_multipliers=(1, 2), image_side=8,
                   time_embed_dim=8, classifier_hidden=16, num_classes=3)


@pytest.fixture(scope="module")
def model():
    return JointModel.build(SMALL, seed=7)


def test_time_embedding_zero_and_one():
    e0 = time_embedding(0, 6)
    assert np.allclose(e0[0::2], 0.0) and np.allclose(e0[1::2], 1.0)
    e1 = time_embedding(1, 2)
    assert np.allclose(e1, [np.sin(1.0), np.cos(1.0)])


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(OddDim):
        time_embedding(3, 5)


def test_time_embedding_distinct_over_full_range():
    T = 200
    rows = np.stack([time_embedding(t, 64) for t in range(1, T + 1)])
    assert len(np.unique(rows, axis=0)) == T


def test_zero_init_head_gives_zero_noise(model):
    z = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    out = denoise_forward(model, z, 3)
    assert np.array_equal(out.eps_nchw, np.zeros_like(z))


def test_output_shape_matches_input():
    cfg = UNetConfig(base_channels=8, channel_multipliers=(1, 2), image_side=16,
                     time_embed_dim=8, classifier_hidden=16)
    m = JointModel.build(cfg, seed=1)
    z = np.zeros((4, 1, 16, 16))
    out = denoise_forward(m, z, np.array([1, 2, 3, 4]))
    assert out.eps_nchw.shape == z.shape
    assert m.predict_noise(z, 1).shape == z.shape


def test_feature_dimension_spec_case():
    # base 32, multipliers [1,2,4], 32x32 input: bottleneck 8x8x128,
    # pooled once by 2 -> 4*4*128 = 2048 (under the 10000 cap)
    cfg = UNetConfig(base_channels=32, channel_multipliers=(1, 2, 4),
                     image_side=32)
    m = JointModel.build(cfg, seed=0)
    assert m.feature_dim == 2048
    z = np.zeros((1, 1, 32, 32))
    out = denoise_forward(m, z, 1)
    assert out.features.shape == (1, 2048)


def test_feature_pool_kernel_cap_active():
    # forces extra pooling: 16x16x1024 bottleneck down to 2x2x1024 = 4096
    assert feature_pool_kernel(1024, 16, 10_000) == 8
    assert feature_pool_kernel(128, 8, 10_000) == 2
    assert feature_pool_kernel(32, 1, 10_000) == 1


def test_zero_init_classifier_probs_half(model):
    z = np.random.default_rng(1).standard_normal((3, 1, 8, 8))
    probs = model.class_probs(z, 2)
    assert np.allclose(probs, 0.5)


def test_classifier_finite_at_max_noise(model):
    z = np.random.default_rng(2).standard_normal((2, 1, 8, 8))
    logits = classify(model, z, 200)
    assert np.isfinite(logits.data).all()


def test_rejects_wrong_input_shape(model):
    with pytest.raises(ShapeMismatch):
        denoise_forward(model, np.zeros((1, 1, 4, 4)), 1)


def test_parameter_sharing_sensitivity():
    m = JointModel.build(SMALL, seed=3)
    # give the heads non-zero weights so both outputs react to the encoder
    r = np.random.default_rng(0)
    m.params["dec.out.w"].data = 0.1 * r.standard_normal(m.params["dec.out.w"].shape)
    m.params["cls.fc2.w"].data = 0.1 * r.standard_normal(m.params["cls.fc2.w"].shape)
    z = r.standard_normal((1, 1, 8, 8))
    eps0 = m.predict_noise(z, 2)
    log0 = m.class_probs(z, 2)
    m.params["enc.stem.w"].data = m.params["enc.stem.w"].data + 0.05
    assert not np.array_equal(m.predict_noise(z, 2), eps0)
    assert not np.array_equal(m.class_probs(z, 2), log0)


def test_classifier_invariant_to_decoder_weights():
    m = JointModel.build(SMALL, seed=4)
    z = np.random.default_rng(3).standard_normal((2, 1, 8, 8))
    before = m.class_probs(z, 5)
    for name, p in m.params.items():
        if name.startswith("dec."):
            p.data = p.data + 1.0
    assert np.array_equal(m.class_probs(z, 5), before)


def test_denoise_then_classify_reuses_encoder(model):
    z = Tensor(np.random.default_rng(4).standard_normal((2, 1, 8, 8)))
    with ad.op_count() as denoise_only:
        out = model.denoise(z, 1)
    with ad.op_count() as head_only:
        model.classify_features(out.features)
    with ad.op_count() as combined:
        out2 = model.denoise(z, 1)
        model.classify_features(out2.features)
    total = lambda c: sum(c.values())
    assert total(combined) == total(denoise_only) + total(head_only)
    # running classify from scratch would add a full extra encoder pass
    with ad.op_count() as from_scratch:
        model.classify(z, 1)
    assert total(from_scratch) > total(head_only)


def test_classifier_input_gradient_matches_finite_differences():
    m = JointModel.build(SMALL, seed=5)
    r = np.random.default_rng(5)
    m.params["cls.fc2.w"].data = 0.3 * r.standard_normal(m.params["cls.fc2.w"].shape)
    z0 = r.standard_normal((1, 1, 8, 8))
    k = 1
    grad = m.class_score_grad(z0, 4, class_idx=k, toward=True)
    assert grad.shape == z0.shape

    h = 1e-5
    rng = np.random.default_rng(6)
    flat = z0.reshape(-1)
    worst = 0.0
    for i in rng.choice(z0.size, size=20, replace=False):
        for sgn in (+1, -1):
            shifted = flat.copy()
            shifted[i] += sgn * h
            p = m.class_probs(shifted.reshape(z0.shape), 4)[0, k]
            if sgn > 0:
                f_plus = np.log(p)
            else:
                f_minus = np.log(p)
        numeric = (f_plus - f_minus) / (2 * h)
        err = abs(grad.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    assert worst < 1e-4


def test_class_score_grad_rejects_bad_index():
    from jdl.errors import BadClassIndex
    m = JointModel.build(SMALL, seed=5)
    with pytest.raises(BadClassIndex):
        m.class_score_grad(np.zeros((1, 1, 8, 8)), 1, class_idx=7)


def test_save_load_roundtrip(tmp_path, model):
    path = tmp_path / "model.jdlw"
    model.save(path)
    other = JointModel.build(SMALL, seed=99)
    other.load(path)
    z = np.random.default_rng(7).standard_normal((1, 1, 8, 8))
    assert np.array_equal(other.predict_noise(z, 3), model.predict_noise(z, 3))


def test_load_rejects_shape_mismatch(tmp_path, model):
    from jdl.errors import CheckpointMismatch
    path = tmp_path / "model.jdlw"
    model.save(path)
    wrong = JointModel.build(
        UNetConfig(base_channels=16, channel_multipliers=(1, 2), image_side=8,
                   time_embed_dim=8, classifier_hidden=16), seed=0)
    with pytest.raises(CheckpointMismatch):
        wrong.load(path)
