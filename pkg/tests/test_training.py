import math

import numpy as np
import pytest

from relaff import autodiff as ad
from relaff.autodiff import NaNError, ParameterStore
from relaff.config import from_dict
from relaff.data import SamplingConfig, Video, generate_corpus, make_batch
from relaff.training import (
    AdamState,
    Variant,
    ablation_variants,
    adam_step,
    alignment_score,
    batch_losses,
    build_model,
    gradient_flow_audit,
    inference_starts,
    infer_video,
    lr_schedule,
    make_fold_plan,
    run_ablation,
    run_cross_validation,
    subsample,
    train_epoch,
    train_model,
)
from relaff.weights import dumps, load_weights, loads, save_weights

from .conftest import tiny_raw


def test_lr_schedule_closed_form():
    for e in range(21):
        assert lr_schedule(e) == 1e-4 * 0.1 ** (e // 5)
    assert lr_schedule(0) == 1e-4 and lr_schedule(4) == 1e-4
    assert lr_schedule(5) == pytest.approx(1e-5, rel=1e-15)
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_adam_zero_gradient_no_decay_is_identity():
    store = ParameterStore()
    p = store.add("w", np.array([1.0, -2.0]))
    adam_step(store, AdamState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_on_quadratic():
    """First Adam step is lr * g / (|g| + eps): theta 1 -> 1 - lr (almost)."""
    store = ParameterStore()
    p = store.add("theta", np.array(1.0))
    ad.backward(ad.scale(ad.square(p), 0.5))
    adam_step(store, AdamState(lr=1e-3, weight_decay=0.0))
    assert float(p.data) == pytest.approx(1.0 - 1e-3 * 1.0 / (1.0 + 1e-8), abs=1e-15)


def test_adam_decoupled_weight_decay():
    store = ParameterStore()
    p = store.add("w", np.array([2.0]))
    adam_step(store, AdamState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_adam_names_nan_parameter():
    store = ParameterStore()
    p = store.add("enc.bad", np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(NaNError, match="enc.bad"):
        adam_step(store, AdamState())


def test_frozen_backbone_unchanged_after_100_steps(tiny_cfg, tiny_corpus):
    model = build_model(tiny_cfg, 0)
    before = {n: model.store[n].data.copy() for n in model.store.frozen}
    state = AdamState(lr=1e-2, weight_decay=5e-3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        batch = make_batch(tiny_corpus, 4, SamplingConfig(T=4, K=1), rng)
        model.store.zero_grad()
        ad.backward(batch_losses(model, batch, tiny_cfg, 1, 2.0, rng).l_total)
        adam_step(model.store, state)
    for n, arr in before.items():
        assert model.store[n].data.tobytes() == arr.tobytes()


def test_lambda_zero_total_equals_regression(tiny_cfg, tiny_corpus):
    model = build_model(tiny_cfg, 0)
    rec = train_epoch(model, tiny_corpus, tiny_cfg, AdamState(lr=1e-3), 0, np.random.default_rng(0), lam=0.0)
    assert rec.l_total == rec.l_reg
    assert rec.batches == 2 and rec.skipped == 0


def test_training_reduces_loss_on_noise_free_corpus():
    cfg = from_dict(tiny_raw(
        encoder={"H": 16, "W": 16, "D": 16, "D_f": 16, "frozen_width": 64, "patch_grid": 4},
        synth={"subjects": 4, "videos_per_subject": 2, "L": 24, "noise": 0.0, "context_dependence": 0.0},
        training={"loss_kind": "rmse", "B": 8, "epochs": 20, "batches_per_epoch": 4, "lr": 3e-3, "lr_step": 100},
    ))
    corpus = generate_corpus(cfg.synth, 0)
    _, epochs, _ = train_model(cfg, corpus, Variant(), 0, 0)
    assert epochs[-1].l_reg < 0.5 * epochs[0].l_reg


def test_identical_labels_pull_cosines_towards_one(tiny_cfg, tiny_corpus):
    """With M all ones, one gradient step on L_rel raises the feature cosine."""
    from relaff.losses import cosine_similarity_matrix, relational_loss

    model = build_model(tiny_cfg, 0)
    frames = np.stack([tiny_corpus[0].frames[:4], tiny_corpus[3].frames[:4]])
    enc = model.encoder

    def cosine():
        z = enc.encode_frames(frames)
        return z, cosine_similarity_matrix(z)

    z, m_hat = cosine()
    before = float(m_hat.data[0, 1])
    model.store.zero_grad()
    ad.backward(relational_loss(m_hat, ad.constant(np.ones((2, 2)))))
    for p in model.store.trainable().values():
        p.data -= 1e-2 * p.grad
    with ad.no_grad():
        after = float(cosine()[1].data[0, 1])
    assert before < 1.0
    assert after > before


def test_inference_windows():
    assert inference_starts(8, 4) == [0, 4]
    assert inference_starts(10, 4) == [0, 4]
    assert inference_starts(3, 4) == [0]


class _ConstantModel:
    """Stand-in with a forward that returns the same prediction for every clip."""

    def __init__(self, value, D=8):
        self.value = np.asarray(value, dtype=float)
        self.encoder = type("E", (), {"frozen_features": staticmethod(lambda x: x)})()

    def forward(self, clips, ctx, K):
        from relaff.fusion import RegressionOutput

        B = clips.shape[0]
        per = ad.constant(np.tile(self.value, (B, 1)))
        return RegressionOutput(per, None, per), None


def _video(L, value=0.0):
    return Video(frames=np.full((L, 8, 8, 3), value, dtype=np.float32), subject_id="S0",
                 labels=np.array([0.5, 0.0]), fps=3.0, video_id="v")


def test_infer_video_constant_output_and_clip_count():
    pred = infer_video(_ConstantModel([0.2, -0.4]), _video(8), T=4, K=1)
    assert pred.n_clips == 2
    # training range [-1, 1] -> native arousal [0, 1], valence [-1, 1]
    np.testing.assert_allclose(pred.per_label, [0.6, -0.4])


def test_infer_video_short_video_uses_one_looped_clip(caplog):
    import logging

    with caplog.at_level(logging.INFO):
        pred = infer_video(_ConstantModel([0.0, 0.0]), _video(3), T=4, K=0)
    assert pred.n_clips == 1
    assert "shorter than T" in caplog.text


def test_infer_video_independent_of_clip_order(tiny_cfg, tiny_corpus):
    from relaff.training import predict_clips_train_range

    model = build_model(tiny_cfg, 0)
    per_clip, _ = predict_clips_train_range(model, tiny_corpus[0], 4, 1)
    assert per_clip.shape[0] == 6
    np.testing.assert_allclose(per_clip[::-1].mean(axis=0), per_clip.mean(axis=0), atol=1e-15)


def test_fold_plan(tiny_corpus):
    plan = make_fold_plan(tiny_corpus)
    assert [h for h, _ in plan.folds] == ["S000", "S001", "S002"]
    for held, train in plan.folds:
        assert held not in train and len(train) == 2
    with pytest.raises(ValueError):
        make_fold_plan([v for v in tiny_corpus if v.subject_id == "S000"])


def test_subsample_fraction(tiny_corpus):
    rng = np.random.default_rng(0)
    assert len(subsample(tiny_corpus, 0.2, rng)) == 2
    assert subsample(tiny_corpus, 1.0, rng) == tiny_corpus


def test_cross_validation_pools_all_folds(tiny_cfg, tiny_corpus):
    res = run_cross_validation(tiny_corpus, make_fold_plan(tiny_corpus), tiny_cfg)
    assert len(res.folds) == 3
    assert res.pooled.n == 6
    assert set(res.fold_mean) >= {"mean.CCC", "mean.PCC"}
    assert -1.0 <= res.alignment <= 1.0


def test_cross_validation_parallel_matches_serial(tiny_cfg, tiny_corpus):
    plan = make_fold_plan(tiny_corpus)
    a = run_cross_validation(tiny_corpus, plan, tiny_cfg, jobs=1)
    b = run_cross_validation(tiny_corpus, plan, tiny_cfg, jobs=2)
    assert a.pooled.flat() == b.pooled.flat()


def test_perfect_predictions_pool_to_one():
    from relaff.metrics import metrics_report

    y = np.random.default_rng(0).normal(size=(9, 2))
    rep = metrics_report(np.concatenate([y[:3], y[3:6], y[6:]]), y)
    assert rep.aggregate["PCC"] == pytest.approx(1.0) and rep.aggregate["CCC"] == pytest.approx(1.0)


def test_ablation_variant_mapping(tiny_cfg):
    v = {x.name: x for x in ablation_variants(tiny_cfg)}
    assert list(v) == ["Proposed", "w/o L_rel", "w/o K w/o L_rel", "L_cont"]
    assert v["w/o K w/o L_rel"].K == 0 and v["w/o K w/o L_rel"].lam == 0.0
    assert v["w/o L_rel"].lam == 0.0 and v["w/o L_rel"].K is None
    assert v["L_cont"].contrastive


def test_contrastive_variant_freezes_encoder(tiny_cfg, tiny_corpus):
    model, _, history = train_model(tiny_cfg, tiny_corpus, Variant("L_cont", lam=0.0, contrastive=True), 0, 0)
    assert len(history) == tiny_cfg.training.contrastive_epochs
    assert set(model.encoder.parameter_names()) <= model.store.frozen
    assert "head.fc.weight" not in model.store.frozen


def test_run_ablation_four_rows(tiny_cfg, tiny_corpus):
    rows = run_ablation(tiny_corpus, tiny_cfg)
    assert [r.variant for r in rows] == ["Proposed", "w/o L_rel", "w/o K w/o L_rel", "L_cont"]


def test_gradient_flow_audit(tiny_cfg, tiny_corpus):
    model = build_model(tiny_cfg, 0)
    batch = make_batch(tiny_corpus, 4, SamplingConfig(T=4, K=1), np.random.default_rng(0))
    audit = gradient_flow_audit(model, batch, tiny_cfg, K=1, lam=2.0)
    assert audit["context_evaluated"]
    assert audit["context_branch_abs_grad"] == 0.0
    assert audit["frozen_abs_grad"] == 0.0
    assert audit["clip_branch_abs_grad"] > 0.0


def test_untrained_alignment_near_zero():
    cfg = from_dict(tiny_raw(synth={"subjects": 6, "videos_per_subject": 4, "L": 24, "noise": 0.1},
                             training={"B": 8}))
    corpus = generate_corpus(cfg.synth, 1)
    score = alignment_score(build_model(cfg, 0), corpus, cfg, 50, np.random.default_rng(0))
    assert abs(score) < 0.2


def test_alignment_undefined_for_single_video(tiny_cfg, tiny_corpus):
    assert math.isnan(alignment_score(build_model(tiny_cfg, 0), tiny_corpus[:1], tiny_cfg, 2,
                                      np.random.default_rng(0)))


def test_weight_file_round_trip(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg, 0)
    path = tmp_path / "w.rafw"
    save_weights(model.store, path)
    blob = path.read_bytes()
    assert blob[:5] == b"RAFW1"
    back = load_weights(path)
    assert list(back) == model.store.names()
    for n, arr in back.items():
        assert arr.tobytes() == model.store[n].data.tobytes()
    fresh = build_model(tiny_cfg, 1)
    fresh.store.load(back)
    assert fresh.store["head.fc.weight"].data.tobytes() == model.store["head.fc.weight"].data.tobytes()


def test_weight_file_byte_layout():
    blob = dumps({"ab": np.array([[1.0, 2.0]])})
    expected = (b"RAFW1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
                + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], dtype="<f8").tobytes())
    assert blob == expected
    with pytest.raises(ValueError):
        loads(b"XXXXX")
    with pytest.raises(ValueError):
        loads(blob + b"\0")
