import math

import numpy as np
import pytest

from pstr import gradcheck
from pstr import numerics as nx
from pstr.attention import ReferencePoint
from pstr.detector import (
    Backbone,
    ConfigError,
    Decoder,
    DetectorConfig,
    Encoder,
    PredictionHead,
    grid_centers,
    predictions_from,
)
from pstr.numerics import Tensor


@pytest.fixture(autouse=True)
def _float64():
    with nx.default_dtype(np.float64):
        yield


def jitter(module, rng, scale=0.2):
    for p in module.parameters():
        p.data = p.data + rng.normal(0, scale, size=p.shape)
    return module


# -- backbone -------------------------------------------------------------
def test_backbone_pyramid_shapes():
    bb = Backbone(np.random.default_rng(0), DetectorConfig(d_model=8))
    f = bb(np.random.default_rng(1).uniform(size=(1, 64, 64, 3)))
    assert f.P2.shape == (1, 16, 16, 8)
    assert f.P3.shape == (1, 8, 8, 8)
    assert f.P4.shape == (1, 4, 4, 8)


def test_backbone_deterministic():
    img = np.random.default_rng(1).uniform(size=(1, 32, 32, 3))
    a = Backbone(np.random.default_rng(5), DetectorConfig(d_model=8))(img)
    b = Backbone(np.random.default_rng(5), DetectorConfig(d_model=8))(img)
    for name in ("P2", "P3", "P4"):
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_backbone_zero_image_zero_bias_is_zero():
    bb = Backbone(np.random.default_rng(0), DetectorConfig(d_model=8))
    for name, p in bb.named_parameters():
        if name.endswith("bias"):
            p.data[:] = 0.0
    f = bb(np.zeros((1, 32, 32, 3)))
    for name in ("P2", "P3", "P4"):
        np.testing.assert_array_equal(f[name].data, 0.0)


def test_backbone_rejects_indivisible_size():
    bb = Backbone(np.random.default_rng(0), DetectorConfig(d_model=8))
    with pytest.raises(ConfigError, match="divisible"):
        bb(np.zeros((1, 40, 40, 3)))


def test_config_rejects_bad_strides():
    with pytest.raises(ConfigError):
        DetectorConfig(strides=(4, 6, 16))


# -- encoder --------------------------------------------------------------
def test_encoder_keeps_shape():
    enc = Encoder(np.random.default_rng(0), DetectorConfig(d_model=8, n_heads=2))
    p4 = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4, 8)))
    outs = enc(p4)
    assert len(outs) == 3
    assert all(o.shape == p4.shape for o in outs)


def test_encoder_single_pixel_is_a_pointwise_transform():
    cfg = DetectorConfig(d_model=8, n_heads=2, n_encoders=1)
    enc = Encoder(np.random.default_rng(0), cfg)
    att = enc.layers[0].attn
    att.offset_proj.bias.data[:] = 0.0  # every point on the lone pixel centre
    x = np.random.default_rng(1).normal(size=(1, 1, 1, 8))
    _, aux = att(Tensor(x.reshape(1, 1, 8)), ReferencePoint(np.full((1, 1, 2), 0.5)), Tensor(x), return_aux=True)
    expected = att.out_proj(att.value_proj(Tensor(x.reshape(1, 1, 8)))).data
    np.testing.assert_allclose(aux["pre_residual"], expected, atol=1e-12)


def test_encoder_stack_gradcheck():
    rng = nx.make_rng(3)
    for _ in range(3):
        assert gradcheck._encoder(rng) < gradcheck.TOL


def test_grid_centers():
    np.testing.assert_allclose(grid_centers(1, 2), [[0.25, 0.5], [0.75, 0.5]])


# -- decoder --------------------------------------------------------------
def test_decoder_levels_and_shapes():
    cfg = DetectorConfig(d_model=8, n_heads=2, num_queries=5)
    out = Decoder(np.random.default_rng(0), cfg)(Tensor(np.random.default_rng(1).normal(size=(2, 3, 3, 8))))
    assert len(out.features) == 3
    for f, lg, bx in zip(out.features, out.logits, out.boxes):
        assert f.shape == (2, 5, 8)
        assert lg.shape == (2, 5)
        assert bx.shape == (2, 5, 4)


def test_single_query_self_attention_is_identity_weight():
    cfg = DetectorConfig(d_model=8, n_heads=2, num_queries=1)
    dec = Decoder(np.random.default_rng(0), cfg)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 8)))
    _, w = dec.layers[0].self_attn(x, dec.query_pos, return_weights=True)
    np.testing.assert_array_equal(w, 1.0)


def test_decoder_gradcheck():
    rng = nx.make_rng(4)
    for _ in range(3):
        assert gradcheck._decoder(rng) < gradcheck.TOL


# straight-line oracle: plain numpy, one query / head / point at a time
def _ln(v, norm):
    mu = v.mean()
    var = ((v - mu) ** 2).mean()
    return (v - mu) / math.sqrt(var + norm.eps) * norm.gain.data + norm.bias.data


def _lin(v, lin):
    return v @ lin.weight.data + lin.bias.data


def _bilinear(img, x, y):
    H, W, C = img.shape
    x0, y0 = math.floor(x), math.floor(y)
    acc = np.zeros(C)
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < H and 0 <= xx < W:
                acc += wy * wx * img[yy, xx]
    return acc


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _oracle_self_attention(X, P, m, nh):
    n, d = X.shape
    dh = d // nh
    out = np.zeros_like(X)
    for i in range(n):
        cat = []
        for h in range(nh):
            sl = slice(h * dh, (h + 1) * dh)
            qi = _lin(X[i] + P[i], m.q_proj)[sl]
            scores = [qi @ _lin(X[j] + P[j], m.k_proj)[sl] / math.sqrt(dh) for j in range(n)]
            e = np.exp(np.array(scores) - max(scores))
            w = e / e.sum()
            cat.append(sum(w[j] * _lin(X[j], m.v_proj)[sl] for j in range(n)))
        out[i] = _ln(X[i] + _lin(np.concatenate(cat), m.out_proj), m.norm)
    return out


def _oracle_cross_attention(X, P, boxes, M, m, nh, K):
    n, d = X.shape
    H, W, _ = M.shape
    dh = d // nh
    V = np.stack([[_lin(M[r, c], m.value_proj) for c in range(W)] for r in range(H)])
    out = np.zeros_like(X)
    for i in range(n):
        qin = X[i] + P[i]
        off = _lin(qin, m.offset_proj).reshape(nh, K, 2)
        logit = _lin(qin, m.weight_proj).reshape(nh, K)
        cx, cy, bw, bh = np.clip(boxes[i], 0.0, 1.0)
        cat = []
        for h in range(nh):
            e = np.exp(logit[h] - logit[h].max())
            w = e / e.sum()
            acc = np.zeros(dh)
            for k in range(K):
                lx = cx + off[h, k, 0] * bw * 0.5 / K
                ly = cy + off[h, k, 1] * bh * 0.5 / K
                acc += w[k] * _bilinear(V[:, :, h * dh : (h + 1) * dh], lx * W - 0.5, ly * H - 0.5)
            cat.append(acc)
        out[i] = _ln(X[i] + _lin(np.concatenate(cat), m.out_proj), m.norm)
    return out


def _oracle_mlp(v, mlp):
    for i, layer in enumerate(mlp.layers):
        v = _lin(v, layer)
        if i < len(mlp.layers) - 1:
            v = np.maximum(v, 0.0)
    return v


def _oracle_decoder(dec, M, cfg):
    X = dec.query_content.data.copy()
    P = dec.query_pos.data
    ref_logit = dec.init_ref.data
    ref_box = _sigmoid(ref_logit)
    feats, logits, boxes = [], [], []
    for layer, head in zip(dec.layers, dec.heads):
        X = _oracle_self_attention(X, P, layer.self_attn, cfg.n_heads)
        X = _oracle_cross_attention(X, P, ref_box, M, layer.cross_attn, cfg.n_heads, cfg.n_points)
        X = np.stack([_ln(x + _lin(np.maximum(_lin(x, layer.ffn.fc1), 0), layer.ffn.fc2), layer.ffn.norm) for x in X])
        lg = np.array([_oracle_mlp(x, head.cls)[0] for x in X])
        bx = np.stack([_sigmoid(_oracle_mlp(x, head.box) + ref_logit[i]) for i, x in enumerate(X)])
        feats.append(X)
        logits.append(lg)
        boxes.append(bx)
        ref_box = bx
        clipped = np.clip(bx, 1e-5, 1 - 1e-5)
        ref_logit = np.log(clipped / (1 - clipped))
    return feats, logits, boxes


def test_decoder_matches_straight_line_oracle():
    cfg = DetectorConfig(d_model=8, n_heads=2, n_points=2, num_queries=2)
    rng = np.random.default_rng(7)
    dec = jitter(Decoder(rng, cfg), rng, 0.15)
    M = rng.normal(size=(2, 2, 8))
    out = dec(Tensor(M[None]))
    feats, logits, boxes = _oracle_decoder(dec, M, cfg)
    for j in range(3):
        np.testing.assert_allclose(out.features[j].data[0], feats[j], atol=1e-10)
        np.testing.assert_allclose(out.logits[j].data[0], logits[j], atol=1e-10)
        np.testing.assert_allclose(out.boxes[j].data[0], boxes[j], atol=1e-10)


# -- prediction head --------------------------------------------------------
def test_zero_logits_score_half():
    preds = predictions_from(np.zeros(3), np.full((3, 4), 0.5))
    assert [p.score for p in preds] == [0.5, 0.5, 0.5]


def test_head_boxes_inside_unit_square_and_deterministic():
    rng = np.random.default_rng(8)
    head = jitter(PredictionHead(rng, 8), rng, 2.0)
    feats = Tensor(rng.normal(size=(1, 6, 8)) * 10)
    ref = rng.normal(size=(1, 6, 4)) * 5
    lg1, bx1 = head(feats, ref)
    lg2, bx2 = head(feats, ref)
    assert np.all((bx1.data >= 0) & (bx1.data <= 1))
    np.testing.assert_array_equal(lg1.data, lg2.data)
    np.testing.assert_array_equal(bx1.data, bx2.data)
    assert len(predictions_from(lg1.data[0], bx1.data[0])) == 6
