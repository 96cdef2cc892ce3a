import numpy as np
import pytest

from pstr import gradcheck
from pstr import numerics as nx
from pstr.attention import AttentionConfig
from pstr.detector import BackboneFeatures, ConfigError, DecoderFeatures
from pstr.numerics import Tensor
from pstr.reid import ReidConfig, ReidDecoder, ReidHead


@pytest.fixture(autouse=True)
def _float64():
    with nx.default_dtype(np.float64):
        yield


CFG = AttentionConfig(8, 2, 2)


def inputs(rng, d=8, n=3, b=1):
    feats = BackboneFeatures(*(Tensor(rng.normal(size=(b, s, s, d))) for s in (8, 4, 2)))
    boxes = np.concatenate([rng.uniform(0.3, 0.7, (b, n, 2)), rng.uniform(0.1, 0.4, (b, n, 2))], -1)
    dec = DecoderFeatures(
        features=[Tensor(rng.normal(size=(b, n, d))) for _ in range(3)],
        boxes=[Tensor(boxes + 0.01 * j) for j in range(3)],
    )
    return feats, dec


def per_scale_params(head, scale):
    return sum(p.data.size for dec in head.decoders[scale] for p in dec.parameters())


def test_identical_queries_give_identical_embeddings():
    rng = np.random.default_rng(0)
    dec = ReidDecoder(rng, CFG, ReidConfig())
    q = rng.normal(size=8)
    box = np.array([0.5, 0.5, 0.3, 0.3])
    out = dec(Tensor(np.stack([q, q])[None]), np.stack([box, box])[None], Tensor(rng.normal(size=(1, 4, 4, 8)))).data
    np.testing.assert_array_equal(out[0, 0], out[0, 1])


def test_shared_variant_reuses_one_parameter_set():
    head = ReidHead(np.random.default_rng(1), CFG, ReidConfig("shared"))
    for s in ("P2", "P3", "P4"):
        assert head.decoder_for(s, 1) is head.decoder_for(s, 3)


def test_parallel_variant_has_distinct_decoders():
    head = ReidHead(np.random.default_rng(1), CFG, ReidConfig("parallel"))
    assert len({id(head.decoder_for("P3", lv)) for lv in (1, 2, 3)}) == 3


def test_reid_decode_gradcheck():
    rng = nx.make_rng(2)
    for _ in range(3):
        assert gradcheck._reid_decoder(rng) < gradcheck.TOL


@pytest.mark.parametrize("variant,count", [("shared", 9), ("parallel", 9), ("single", 3)])
def test_feature_set_counts(variant, count):
    rng = np.random.default_rng(3)
    head = ReidHead(rng, CFG, ReidConfig(variant))
    out = head.forward_train(*inputs(rng))
    assert len(out.per_level) == count
    if variant == "single":
        assert {lv for lv, _ in out.per_level} == {3}


def test_parameter_ratios_per_scale():
    rng = np.random.default_rng(4)
    counts = {v: per_scale_params(ReidHead(rng, CFG, ReidConfig(v)), "P2") for v in ("single", "shared", "parallel")}
    assert counts["single"] == counts["shared"]
    assert counts["parallel"] == 3 * counts["shared"]


def test_embeddings_are_unit_norm():
    rng = np.random.default_rng(5)
    out = ReidHead(rng, CFG, ReidConfig()).forward_train(*inputs(rng))
    for t in out.per_level.values():
        np.testing.assert_allclose(np.linalg.norm(t.data, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out.concat.data, axis=-1), 1.0, atol=1e-12)


def test_full_width_concat_dimension():
    rng = np.random.default_rng(6)
    cfg = AttentionConfig(256, 8, 4)
    head = ReidHead(rng, cfg, ReidConfig())
    out = head.forward_infer(*inputs(rng, d=256, n=2))
    assert out.concat.shape == (1, 2, 768)


def test_single_scale_concat_is_the_p4_embedding():
    rng = np.random.default_rng(7)
    head = ReidHead(rng, CFG, ReidConfig(scales=("P4",)))
    out = head.forward_infer(*inputs(rng))
    np.testing.assert_array_equal(out.concat.data, out.per_level[(3, "P4")].data)


def test_inference_path_ignores_training_only_levels():
    rng = np.random.default_rng(8)
    head = ReidHead(rng, CFG, ReidConfig("shared"))
    feats, dec = inputs(rng)
    train = head.forward_train(feats, dec)
    infer = head.forward_infer(feats, dec)
    for s in ("P2", "P3", "P4"):
        np.testing.assert_array_equal(train.per_level[(3, s)].data, infer.per_level[(3, s)].data)
    np.testing.assert_array_equal(train.concat.data, infer.concat.data)


def test_deformable_ablation_runs():
    rng = np.random.default_rng(9)
    head = ReidHead(rng, CFG, ReidConfig(attention="deformable"))
    assert head.forward_infer(*inputs(rng)).concat.shape == (1, 3, 24)


def test_encoder_source_feeds_the_encoder_map():
    rng = np.random.default_rng(10)
    head = ReidHead(rng, CFG, ReidConfig(scales=("P4",), input_source="encoder_2"))
    feats, dec = inputs(rng)
    enc = [Tensor(rng.normal(size=(1, 2, 2, 8))) for _ in range(3)]
    assert head.input_map(feats, enc, "P4") is enc[1]


def test_config_errors():
    with pytest.raises(ConfigError, match="variant"):
        ReidConfig(variant="twin")
    with pytest.raises(ConfigError):
        ReidConfig(scales=("P5",))
    with pytest.raises(ConfigError):
        ReidConfig(input_source="encoder_1")
    head = ReidHead(np.random.default_rng(0), CFG, ReidConfig(scales=("P3",)))
    with pytest.raises(ConfigError, match="P2"):
        head.decoder_for("P2", 3)
