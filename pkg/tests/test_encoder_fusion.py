import numpy as np
import pytest

from relaff import autodiff as ad
from relaff.autodiff import DimensionError
from relaff.data import clip_at, context_window, SamplingConfig
from relaff.encoder import ConfigError, EncoderConfig, patch_means, positional_encoding
from relaff.fusion import ContextRegressor, HeadConfig, fuse
from relaff.training import build_model


def test_positional_encoding_formula():
    pe = positional_encoding(5, 6)
    for t in range(5):
        for i in range(3):
            assert pe[t, 2 * i] == pytest.approx(np.sin(t / 10000 ** (2 * i / 6)), abs=1e-15)
            assert pe[t, 2 * i + 1] == pytest.approx(np.cos(t / 10000 ** (2 * i / 6)), abs=1e-15)


def test_patch_means_oracle():
    frames = np.random.default_rng(0).random((2, 4, 4, 3))
    out = patch_means(frames, 2)
    assert out.shape == (2, 12)
    top_left = frames[0, :2, :2, :].mean(axis=(0, 1))
    np.testing.assert_allclose(out[0].reshape(2, 2, 3)[0, 0], top_left)


def test_encoder_config_validation():
    with pytest.raises(ConfigError, match="encoder.D_f"):
        EncoderConfig(D=8, D_f=16)
    with pytest.raises(ConfigError, match="encoder.attention_heads"):
        EncoderConfig(D=6, D_f=6, attention_heads=4)
    with pytest.raises(ConfigError, match="encoder.patch_grid"):
        EncoderConfig(H=10, W=10, patch_grid=4)


def test_clip_feature_shape_and_determinism(tiny_cfg, tiny_corpus):
    model = build_model(tiny_cfg, 0)
    clip = clip_at(tiny_corpus[0], 4, 3)
    z1 = model.encoder.encode_clip(clip)
    z2 = model.encoder.encode_clip(clip)
    assert z1.shape == (tiny_cfg.encoder.D,)
    np.testing.assert_array_equal(z1.data, z2.data)


def test_encoder_sensitive_to_frame_order(tiny_cfg, tiny_corpus):
    model = build_model(tiny_cfg, 0)
    frames = clip_at(tiny_corpus[0], 4, 0).frames
    a = model.encoder.encode_frames(frames).data
    b = model.encoder.encode_frames(frames[::-1].copy()).data
    assert not np.allclose(a, b)


def test_encoder_rejects_wrong_frame_size(tiny_cfg):
    model = build_model(tiny_cfg, 0)
    with pytest.raises(DimensionError):
        model.encoder.backbone_forward(np.zeros((4, 5, 5, 3)))


def test_context_centre_row_is_detached_clip_feature(tiny_cfg, tiny_corpus):
    model = build_model(tiny_cfg, 0)
    video = tiny_corpus[1]
    clip = clip_at(video, 4, 8)
    window = context_window(video, clip, SamplingConfig(T=4, K=1))
    Z = model.encoder.encode_context(window, 1)
    z = model.encoder.encode_clip(clip)
    assert not Z.requires_grad
    np.testing.assert_array_equal(Z.data[1], z.data)


def test_attention_weights_are_a_distribution(tiny_cfg, tiny_corpus, rng):
    model = build_model(tiny_cfg, 0)
    z = ad.constant(rng.normal(size=(3, 8)))
    Z = ad.constant(rng.normal(size=(3, 5, 8)))
    w = model.attention.weights(z, Z).data
    assert w.shape == (3, 5)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_single_slot_attention_returns_value_projection(tiny_cfg, rng):
    model = build_model(tiny_cfg, 0)
    z = ad.constant(rng.normal(size=(2, 8)))
    out = model.attention(z, ad.reshape(z, (2, 1, 8))).data
    s = model.store
    expected = z.data @ s["attention.g.weight"].data + s["attention.g.bias"].data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_fuse_puts_clip_feature_first():
    z = ad.constant(np.ones((2, 3)))
    att = ad.constant(np.zeros((2, 3)))
    np.testing.assert_array_equal(fuse(z, att).data, np.concatenate([np.ones((2, 3)), np.zeros((2, 3))], 1))


def test_attention_shape_errors(tiny_cfg):
    model = build_model(tiny_cfg, 0)
    with pytest.raises(DimensionError):
        model.attention(ad.constant(np.zeros((2, 8))), ad.constant(np.zeros((3, 3, 8))))


def test_split_head_subsets_are_independent(tiny_cfg, rng):
    """Label c reads only subset c of the penultimate vector."""
    model = build_model(tiny_cfg, 0)
    fused = ad.constant(rng.normal(size=(2, 16)))
    before = model.head(fused).per_label.data.copy()
    model.store["head.split.weight"].data[1] += 1.0
    after = model.head(fused).per_label.data
    np.testing.assert_array_equal(before[:, 0], after[:, 0])
    assert not np.allclose(before[:, 1], after[:, 1])


def test_total_score_head(tiny_cfg):
    head = HeadConfig(C=4, total_score_enabled=True, penultimate_width=8)
    model = ContextRegressor(tiny_cfg.encoder, head, init_seed=0)
    out, _ = model.forward_frames(np.full((2, 4, 8, 8, 3), 0.5), None, 0)
    assert out.per_label.shape == (2, 4)
    assert out.total_score.shape == (2, 1)


def test_head_config_validation():
    with pytest.raises(ConfigError):
        HeadConfig(C=3, penultimate_width=8)
    with pytest.raises(ConfigError):
        HeadConfig(C=2, supervised_mask=[False, False])


def test_forward_pipeline_requires_centre_clip(tiny_cfg, tiny_corpus):
    model = build_model(tiny_cfg, 0)
    video = tiny_corpus[0]
    clip = clip_at(video, 4, 4)
    window = context_window(video, clip, SamplingConfig(T=4, K=1))
    out, z = model.forward_pipeline(clip, window)
    assert out.per_label.shape == (1, 2) and z.shape == (1, 8)
    with pytest.raises(ValueError):
        model.forward_pipeline(clip_at(video, 4, 0), window)
    with pytest.raises(ValueError):
        model.forward_pipeline(clip, window[:2])


def test_relational_gradient_stays_upstream_of_fusion(tiny_cfg, tiny_corpus):
    """L_rel alone reaches encoder parameters but never attention or head."""
    from relaff.losses import cosine_similarity_matrix, relational_loss

    model = build_model(tiny_cfg, 0)
    frames = np.stack([clip_at(v, 4, 0).frames for v in tiny_corpus[:3]])
    model.store.zero_grad()
    out, z = model.forward_frames(frames, None, 0)
    ad.backward(relational_loss(cosine_similarity_matrix(z), ad.constant(np.ones((3, 3)))))
    for name in model.parameter_names("attention") + model.parameter_names("head"):
        assert not model.store[name].grad.any(), name
    assert any(model.store[n].grad.any() for n in model.store.trainable() if n.startswith("encoder."))
