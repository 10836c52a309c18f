import csv
import dataclasses

import numpy as np
import pytest

from affectae import tensor as T
from affectae.data import FrameTable, Recording
from affectae.model import AffectModel, ModelConfig
from affectae.train import (
    AdamState,
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    NumericError,
    TrainConfig,
    WindowSampler,
    adam_step,
    clip_gradients,
    load_checkpoint,
    parse_config,
    save_checkpoint,
    train,
)

TINY = ModelConfig.tiny()


def tiny_recordings(n_rec=2, n=20, seed=0):
    """Recordings in the miniature geometry whose labels track image and
    audio brightness, so there is something to learn."""
    rng = np.random.default_rng(seed)
    out = []
    for r in range(n_rec):
        lab = np.clip(np.cumsum(rng.normal(scale=0.2, size=(n, 2)), axis=0), -1, 1)
        img = np.clip(lab[:, :1, None, None] + rng.normal(scale=0.1, size=(n, 4, 4, 3)), -1, 1)
        aud = lab[:, 1:] * 2.0 + rng.normal(scale=0.3, size=(n, 16))
        out.append(Recording(f"t{r}", img.astype(np.float32), aud.astype(np.float32), lab.astype(np.float32)))
    return out


def tiny_config(**kw):
    base = dict(batch_size=4, max_steps=6, eval_interval=3, learning_rate=1e-2, lstm_hidden=3)
    return TrainConfig(**{**base, **kw})


# -- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState.for_params(p)
    before = p["w"].copy()
    for _ in range(3):
        adam_step(p, {"w": np.zeros(3)}, state, 0.1)
    np.testing.assert_array_equal(p["w"], before)
    adam_step(p, {"w": None}, state, 0.1)
    np.testing.assert_array_equal(p["w"], before)


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -1.0, 0.5])}
    state = AdamState.for_params(p)
    adam_step(p, {"w": np.array([3.0, -0.2, 1e-3])}, state, 0.01)
    # bias correction makes the first update lr * g / (|g| + eps')
    np.testing.assert_allclose(p["w"], [0.99, -0.99, 0.49], atol=1e-7)


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = np.zeros_like(theta)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_matches_textbook_update(rng):
    grads = [rng.normal(size=4) for _ in range(5)]
    p = {"w": np.zeros(4)}
    state = AdamState.for_params(p)
    for g in grads:
        adam_step(p, {"w": g}, state, 0.05)
    np.testing.assert_allclose(p["w"], reference_adam(np.zeros(4), grads, 0.05), rtol=1e-12, atol=1e-15)


def test_adam_quadratic_bowl():
    theta = {"w": np.array([1.0, -2.0, 0.5])}
    state = AdamState.for_params(theta)
    for _ in range(2000):
        adam_step(theta, {"w": 2.0 * theta["w"]}, state, 0.01)
    assert np.abs(theta["w"]).max() < 1e-2


def test_adam_shape_mismatch():
    state = AdamState.for_params({"w": np.zeros(3)})
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, state, 0.1)


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    original = g["a"]
    assert clip_gradients(g, 1.0) == 5.0
    np.testing.assert_allclose(np.hypot(g["a"], g["b"]), [1.0])
    assert original[0] == 3.0


# -- loss weights gate parameter groups ---------------------------------------------


def _one_step(cfg, recs):
    res = train(dataclasses.replace(cfg, max_steps=1), recs, model_config=TINY)
    with T.default_dtype(np.float64):
        init = AffectModel(cfg.model_config(TINY), seed=cfg.seed)
    return init, res.model


def test_gamma_zero_freezes_sequence_model():
    init, trained = _one_step(tiny_config(gamma=0.0), tiny_recordings())
    for name in init.groups()["lstm"] + init.groups()["head"]:
        np.testing.assert_array_equal(init.params[name].data, trained.params[name].data)
    assert any(not np.array_equal(init.params[n].data, trained.params[n].data) for n in init.groups()["dec2d"])


def test_zero_reconstruction_weights_freeze_decoders():
    init, trained = _one_step(tiny_config(alpha=0.0, beta=0.0), tiny_recordings())
    for group in ("dec2d", "dec1d"):
        for name in init.groups()[group]:
            np.testing.assert_array_equal(init.params[name].data, trained.params[name].data)
    assert any(not np.array_equal(init.params[n].data, trained.params[n].data) for n in init.groups()["lstm"])


# -- sampler ---------------------------------------------------------------------------


def test_sampler_epoch_covers_each_window_once():
    table = FrameTable.build(tiny_recordings(2, 20), 4)
    s = WindowSampler(table, 4, seed=1, run_length=2)
    seen = np.concatenate([s.batch(i) for i in range(1, s.steps_per_epoch + 1)])
    assert len(seen) == len(set(seen.tolist()))
    first = s.batch(1)
    assert np.all(np.diff(first.reshape(-1, 2), axis=1) == 1)
    np.testing.assert_array_equal(first, WindowSampler(table, 4, seed=1, run_length=2).batch(1))


# -- determinism and persistence ---------------------------------------------------------


def test_fixed_seed_curves_are_identical(tmp_path):
    recs = tiny_recordings()
    for run in ("a", "b"):
        train(tiny_config(), recs, recs[:1], out_dir=tmp_path / run, model_config=TINY)
    a = (tmp_path / "a" / "curve.csv").read_bytes()
    assert a == (tmp_path / "b" / "curve.csv").read_bytes()
    assert (tmp_path / "a" / "final.afck").read_bytes() == (tmp_path / "b" / "final.afck").read_bytes()


def test_different_seed_changes_curve(tmp_path):
    recs = tiny_recordings()
    h0 = train(tiny_config(seed=0), recs, model_config=TINY).history
    h1 = train(tiny_config(seed=1), recs, model_config=TINY).history
    assert [r["total_loss"] for r in h0] != [r["total_loss"] for r in h1]


def test_checkpoint_round_trip_bitwise(tmp_path):
    res = train(tiny_config(max_steps=2), tiny_recordings(), model_config=TINY)
    save_checkpoint(tmp_path / "a.afck", res.model, res.state, {"step": 2})
    model, state, meta = load_checkpoint(tmp_path / "a.afck")
    save_checkpoint(tmp_path / "b.afck", model, state, meta)
    assert (tmp_path / "a.afck").read_bytes() == (tmp_path / "b.afck").read_bytes()
    assert state.step == 2 and meta == {"step": 2}


def test_checkpoint_float32_round_trip(tmp_path):
    res = train(tiny_config(max_steps=1, precision="float32"), tiny_recordings(), model_config=TINY)
    save_checkpoint(tmp_path / "a.afck", res.model, res.state)
    model, _, _ = load_checkpoint(tmp_path / "a.afck")
    assert model.dtype == np.float32
    for k, t in res.model.params.items():
        assert model.params[k].data.tobytes() == t.data.tobytes()


def test_checkpoint_shape_mismatch_is_typed(tmp_path):
    small = AffectModel(ModelConfig.tiny(lstm_hidden=3), seed=0)
    save_checkpoint(tmp_path / "s.afck", small)
    with pytest.raises(CheckpointShapeError, match="lstm"):
        load_checkpoint(tmp_path / "s.afck", AffectModel(ModelConfig.tiny(lstm_hidden=5), seed=0))


def test_hidden_256_checkpoint_into_512_model(tmp_path):
    cfg = ModelConfig.tiny()
    save_checkpoint(tmp_path / "h.afck", AffectModel(dataclasses.replace(cfg, lstm_hidden=256), seed=0))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "h.afck", AffectModel(dataclasses.replace(cfg, lstm_hidden=512), seed=0))


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "c.afck"
    save_checkpoint(p, AffectModel(TINY, seed=0))
    raw = p.read_bytes()
    (tmp_path / "magic.afck").write_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.afck")
    (tmp_path / "ver.afck").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ver.afck")
    (tmp_path / "short.afck").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.afck")


def test_resume_matches_uninterrupted(tmp_path):
    recs = tiny_recordings()
    full = train(tiny_config(max_steps=6), recs, recs[:1], out_dir=tmp_path / "full", model_config=TINY)
    train(tiny_config(max_steps=3), recs, recs[:1], out_dir=tmp_path / "part", model_config=TINY)
    resumed = train(
        tiny_config(max_steps=6), recs, recs[:1], out_dir=tmp_path / "part",
        model_config=TINY, resume=tmp_path / "part" / "final.afck",
    )
    assert [r["total_loss"] for r in resumed.history] == [r["total_loss"] for r in full.history[3:]]
    assert (tmp_path / "full" / "curve.csv").read_bytes() == (tmp_path / "part" / "curve.csv").read_bytes()
    assert (tmp_path / "full" / "final.afck").read_bytes() == (tmp_path / "part" / "final.afck").read_bytes()


def test_curve_columns_and_eval_rows(tmp_path):
    recs = tiny_recordings()
    train(tiny_config(), recs, recs[:1], out_dir=tmp_path, model_config=TINY)
    with open(tmp_path / "curve.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert rows[0]["val_Eav"] == "" and rows[2]["val_Eav"] != ""
    assert (tmp_path / "best.afck").exists()


def test_on_step_can_stop_early():
    res = train(tiny_config(max_steps=10), tiny_recordings(), model_config=TINY, on_step=lambda row: row["step"] >= 4)
    assert len(res.history) == 4 and res.state.step == 4


# -- optimisation sanity -------------------------------------------------------------


def test_overfit_eight_windows_tiny():
    recs = tiny_recordings(1, 20)
    res = train(tiny_config(max_steps=500, batch_size=8, learning_rate=3e-3), recs, model_config=TINY, overfit_windows=range(8))
    losses = np.array([r["total_loss"] for r in res.history])
    assert losses[-1] <= 0.1 * losses[0]


def test_nan_loss_raises_numeric_error():
    recs = tiny_recordings()
    recs[0].labels[:] = np.nan
    with pytest.raises(NumericError) as err:
        train(tiny_config(max_steps=3, batch_size=4), recs[:1], model_config=TINY)
    assert err.value.step == 1 and err.value.recent == []


# -- configuration ----------------------------------------------------------------------


def test_parse_config():
    cfg = parse_config("# run\nlearning_rate = 0.001\nautoencoder=false\nmodalities=audio # only audio\n")
    assert cfg.learning_rate == 0.001 and cfg.autoencoder is False and cfg.modalities == "audio"
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text",
    ["bogus=1", "learning_rate", "batch_size=abc", "learning_rate=-1", "precision=float16", "batch_size=6\nrun_length=4"],
)
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_defaults_follow_published_settings():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (1.0, 1.0, 0.01)
    assert cfg.learning_rate == 1e-4 and cfg.batch_size == 32 and cfg.k == 4 and cfg.lstm_hidden == 512
