import dataclasses

import numpy as np
import pytest

from affectae import layers as L
from affectae import losses
from affectae import tensor as T
from affectae.data import generate_recording
from affectae.model import AffectModel, ModelConfig, layer_shapes
from affectae.tensor import Tensor
from affectae.train import AdamState, adam_step

VISUAL_SHAPES = {
    "enc2d.b0.c3": (48, 48, 16),
    "enc2d.b1.c3": (24, 24, 32),
    "enc2d.fc": (2048,),
    "dec2d.b0.d3": (48, 48, 16),
    "dec2d.b1.d3": (96, 96, 3),
}

# the upsampling step doubles 320 to 640
VISUAL_SHAPESI = {
    "enc1d.c0": (640, 40),
    "enc1d.pool0": (320, 40),
    "enc1d.c1": (320, 40),
    "enc1d.pool1": (32, 40),
    "dec1d.fc_in": (640,),
    "dec1d.fc_out": (1280,),
    "dec1d.reshape": (320, 4),
    "dec1d.d0": (320, 40),
    "dec1d.upsample": (640, 40),
    "dec1d.d1": (640, 1),
}


@pytest.fixture(scope="module")
def full_model():
    with T.default_dtype(np.float32):
        return AffectModel(ModelConfig(), seed=0)


def hand_count(lstm_hidden=512) -> int:
    conv = lambda k, cin, cout: k * cin * cout + cout
    fc = lambda n, m: n * m + m
    lstm = lambda n_in, h: 4 * (h * (n_in + h) + h)
    enc2d = conv(1, 3, 8) + conv(9, 8, 8) + conv(1, 8, 16) + conv(1, 3, 16)
    enc2d += conv(1, 16, 16) + conv(9, 16, 16) + conv(1, 16, 32) + conv(1, 16, 32) + fc(18432, 2048)
    dec2d = fc(2048, 18432) + conv(1, 32, 16) + conv(9, 16, 16) + conv(1, 16, 16) + conv(1, 32, 16)
    dec2d += conv(1, 16, 8) + conv(9, 8, 8) + conv(1, 8, 3) + conv(1, 16, 3)
    enc1d = conv(20, 1, 40) + conv(40, 40, 40)
    dec1d = fc(1280, 640) + fc(640, 1280) + conv(20, 4, 40) + conv(40, 40, 1)
    seq = lstm(3328, lstm_hidden) + lstm(lstm_hidden, lstm_hidden) + fc(lstm_hidden, 2)
    return enc2d + dec2d + enc1d + dec1d + seq


def test_layer_shapes_match_reference_cells():
    shapes = dict(layer_shapes())
    for name, shape in {**VISUAL_SHAPES, **VISUAL_SHAPESI}.items():
        assert shapes[name] == shape, name
    assert shapes["dec2d.fc"] == (18432,)


def test_parameter_count_matches_hand_count(full_model):
    assert full_model.parameter_count() == hand_count() == 87_203_537


def test_parameter_groups(full_model):
    assert set(full_model.groups()) == {"enc2d", "dec2d", "enc1d", "dec1d", "lstm", "head"}


def test_forward_shapes_and_finiteness(full_model):
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, (6, 96, 96, 3)).astype(np.float32)
    audio = rng.normal(size=(6, 640)).astype(np.float32)
    with T.no_grad():
        out = full_model.forward(images, audio, np.array([[0, 1, 2, 3, 4], [1, 2, 3, 4, 5]]))
    assert out.latent2d.shape == (6, 2048)
    assert out.latent1d.shape == (6, 1280)
    assert out.fused.shape == (6, 3328)
    assert out.recon_image.shape == (6, 96, 96, 3)
    assert out.recon_audio.shape == (6, 640)
    assert out.prediction.shape == (2, 2)
    for t in (out.fused, out.recon_image, out.recon_audio, out.prediction):
        assert np.all(np.isfinite(t.data))
    np.testing.assert_array_equal(out.fused.data[:, 2048:], out.latent1d.data)
    np.testing.assert_array_equal(out.fused.data[:, :2048], out.latent2d.data)


def test_zero_audio_reconstructs_finite(full_model):
    with T.no_grad():
        rec = full_model.decode1d(full_model.encode1d(np.zeros((1, 640), np.float32)))
    assert rec.shape == (1, 640) and np.all(np.isfinite(rec.data))


def test_fused_length_is_content_independent(full_model):
    with T.no_grad():
        for fill in (-1.0, 0.0, 0.37):
            lat2 = full_model.encode2d(np.full((1, 96, 96, 3), fill, np.float32))
            lat1 = full_model.encode1d(np.full((1, 640), fill, np.float32))
            assert full_model.fuse(lat2, lat1).shape == (1, 3328)


def test_wrong_input_shapes(full_model):
    with pytest.raises(ValueError):
        full_model.encode2d(np.zeros((1, 64, 64, 3)))
    with pytest.raises(ValueError):
        full_model.encode1d(np.zeros((1, 320)))
    with pytest.raises(ValueError):
        full_model.predict_window(np.zeros((4, 96, 96, 3)), np.zeros((4, 640)))


def test_fuse_unimodal_and_order():
    u = Tensor(np.arange(3.0).reshape(1, 3))
    w = Tensor(np.arange(3.0, 5.0).reshape(1, 2))
    np.testing.assert_array_equal(AffectModel.fuse(u, None).data, u.data)
    fused = AffectModel.fuse(u, w).data
    assert fused[0, 3 + 1] == w.data[0, 1]
    with pytest.raises(ValueError):
        AffectModel.fuse(None, None)


def test_unimodal_fused_sizes():
    assert ModelConfig(modalities="visual").fused_size == 2048
    assert ModelConfig(modalities="audio").fused_size == 1280
    assert ModelConfig().fused_size == 3328


def test_no_autoencoder_has_no_decoder_params():
    m = AffectModel(ModelConfig.tiny(autoencoder=False), seed=0)
    assert not any(name.startswith(("dec2d", "dec1d")) for name in m.params)
    full = AffectModel(ModelConfig.tiny(), seed=0)
    assert any(name.startswith("dec2d") for name in full.params)


# -- prediction over windows ----------------------------------------------------


@pytest.fixture
def tiny():
    return AffectModel(ModelConfig.tiny(), seed=3)


def tiny_window(rng, cfg, n=None):
    n = n or cfg.window
    return rng.uniform(-1, 1, (n, cfg.image_size, cfg.image_size, 3)), rng.normal(size=(n, cfg.audio_length))


def test_predict_window_two_outputs(tiny, rng):
    a, v = tiny.predict_window(*tiny_window(rng, tiny.config))
    assert np.isfinite(a) and np.isfinite(v)


def test_zero_params_predict_zero(tiny, rng):
    for t in tiny.params.values():
        t.data[...] = 0.0
    assert tiny.predict_window(*tiny_window(rng, tiny.config)) == (0.0, 0.0)


def test_window_order_matters(tiny, rng):
    images, audio = tiny_window(rng, tiny.config)
    for t in tiny.params.values():
        t.data += rng.normal(scale=0.3, size=t.shape)
    forward = np.array(tiny.predict_window(images, audio))
    backward = np.array(tiny.predict_window(images[::-1], audio[::-1]))
    assert np.abs(forward - backward).max() > 1e-9


def test_predict_window_length_checked(tiny, rng):
    with pytest.raises(ValueError, match="window"):
        tiny.predict_window(*tiny_window(rng, tiny.config, n=tiny.config.window + 1))


def test_predict_frames_matches_predict_window(tiny, rng):
    images, audio = tiny_window(rng, tiny.config, n=6)
    index = np.array([[0, 1, 2], [3, 4, 5]])
    batch = tiny.predict_frames(images, audio, index, chunk=2)
    for row, idx in zip(batch, index):
        np.testing.assert_allclose(row, tiny.predict_window(images[idx], audio[idx]), atol=1e-12)


def test_feedback_predictions_switch(rng):
    cfg = ModelConfig.tiny(feedback_predictions=True)
    m = AffectModel(cfg, seed=0)
    assert m.params["lstm.l0.w_i"].shape[1] == cfg.fused_size + 2 + cfg.lstm_hidden
    assert np.all(np.isfinite(m.predict_window(*tiny_window(rng, cfg))))


def test_state_dict_round_trip(tiny):
    other = AffectModel(ModelConfig.tiny(), seed=99)
    other.load_state_dict(tiny.state_dict())
    for k in tiny.params:
        assert other.params[k].data.tobytes() == tiny.params[k].data.tobytes()


# -- gradients --------------------------------------------------------------------


def test_tiny_model_gradient_matches_finite_differences():
    from affectae.gradcheck import check_model

    for seed in range(3):
        assert check_model(seed).max_error < 1e-4


def test_every_group_gets_gradient(tiny, rng):
    cfg = tiny.config
    images, audio = tiny_window(rng, cfg, n=cfg.window + 3)
    index = np.array([[t + j for j in range(cfg.window)] for t in range(4)])
    out = tiny.forward(images, audio, index)
    parts = losses.total_loss(out, images, audio, rng.uniform(-1, 1, (4, 2)))
    T.backward(parts.total)
    for group, names in tiny.groups().items():
        norm = np.sqrt(sum(float(np.sum(tiny.params[n].grad ** 2)) for n in names))
        assert norm > 0, group


# -- optimisation sanity on the full-size auto-encoders ---------------------------------


def _overfit(params, loss_fn, steps=500, lr=1e-4):
    state = AdamState.for_params({k: t.data for k, t in params.items()})
    for _ in range(steps):
        for t in params.values():
            t.grad = None
        loss = loss_fn()
        T.backward(loss)
        adam_step({k: t.data for k, t in params.items()}, {k: t.grad for k, t in params.items()}, state, lr)
    return loss_fn().item()


@pytest.mark.slow
def test_overfit_single_image():
    # a noiseless generator frame: per-pixel white noise has more degrees of
    # freedom (27648) than the 24x24x32 decoder grid can carry
    img = generate_recording(0, 5, "clean").images[:1]
    with T.default_dtype(np.float32):
        m = AffectModel(ModelConfig(modalities="visual"), seed=0)
        params = {k: t for k, t in m.params.items() if k.startswith(("enc2d", "dec2d"))}
        final = _overfit(params, lambda: losses.loss_recon(m.decode2d(m.encode2d(img)), img))
    assert final / img.size < 1e-3


@pytest.mark.slow
def test_overfit_single_audio_frame():
    frame = generate_recording(0, 5, "clean").audio[:1]
    with T.default_dtype(np.float32):
        m = AffectModel(ModelConfig(modalities="audio"), seed=0)
        params = {k: t for k, t in m.params.items() if k.startswith(("enc1d", "dec1d"))}
        final = _overfit(params, lambda: losses.loss_recon(m.decode1d(m.encode1d(frame)), frame))
    assert final / frame.size < 1e-3
