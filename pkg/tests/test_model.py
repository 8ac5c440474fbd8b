import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xaln.model import (
    AlignmentModel, AttentionConfig, AudioEncoderConfig, ModelConfig, TagAttention, TagMean,
    VARIANTS, variant_config,
)
from xaln.tensor import Tensor, functional as F, no_grad, precision, rng as rngs
from xaln.tensor.gradcheck import check_gradients


@pytest.fixture(scope="module")
def model():
    m = AlignmentModel(ModelConfig(), seed=0)
    m.eval()
    return m


def _patches(n, seed=0):
    return np.random.default_rng(seed).random((n, 96, 96)).astype(np.float32)


def _layer_norm(x, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps)


# -- audio side ------------------------------------------------------------------

def test_encoder_chain_dimensions():
    cfg = AudioEncoderConfig()
    assert cfg.spatial() == 3 and cfg.embedding_dim == 1152


def test_parameter_counts(model):
    enc = model.encoder.num_parameters()
    proj = model.projection.num_parameters()
    # closed form: conv weights+biases, BN gamma/beta per layer, final LN gamma/beta
    conv = (1 * 128 * 16 + 128) + 4 * (128 * 128 * 16 + 128)
    assert enc == conv + 5 * 2 * 128 + 2 * 1152 == 1_054_848
    assert proj == 1152 * 1152 + 1152 == 1_328_256
    assert enc + proj == 2_383_104


def test_shapes_and_ranges(model):
    with no_grad():
        z = model.encode_audio(_patches(3))
        xh = model.decode_audio(z)
        phi = model.project_audio(z)
    assert z.shape == (3, 1152) and xh.shape == (3, 96, 96) and phi.shape == (3, 1152)
    assert np.all(xh.data > 0) and np.all(xh.data < 1)
    assert np.all(np.isfinite(z.data))


def test_eval_mode_is_deterministic(model):
    x = _patches(2, seed=4)
    x[1] = x[0]
    with no_grad():
        z = model.encode_audio(x).data
        z2 = model.encode_audio(x).data
        xh = model.decode_audio(Tensor(z)).data
    assert np.array_equal(z[0], z[1]) and np.array_equal(z, z2)
    assert np.array_equal(xh[0], xh[1])


def test_train_mode_dropout_changes_embeddings():
    m = AlignmentModel(ModelConfig(), seed=1)
    x = _patches(2, seed=2)
    with no_grad():
        a = m.encode_audio(x).data
        b = m.encode_audio(x).data
    assert not np.array_equal(a, b)


def test_wrong_shapes_rejected(model):
    with pytest.raises(ValueError):
        model.encode_audio(np.zeros((1, 64, 96), dtype=np.float32))
    with pytest.raises(ValueError):
        model.decode_audio(Tensor(np.zeros((1, 100), dtype=np.float32)))


def test_projection_is_affine():
    m = AlignmentModel(variant_config("w2v-128-mean"), seed=0)
    m.projection.weight.data[:] = 0
    m.projection.bias.data[:] = np.arange(128)
    out = m.project_audio(Tensor(np.random.default_rng(0).normal(size=(2, 1152)).astype(np.float32)))
    assert np.array_equal(out.data, np.tile(np.arange(128, dtype=np.float32), (2, 1)))


def test_projection_gradient(f64):
    r = np.random.default_rng(0)
    lin = AlignmentModel(variant_config("w2v-128-mean"), seed=0).astype(np.float64).projection
    z = Tensor(r.normal(size=(3, 1152)))
    target = r.normal(size=(3, 128))
    res = check_gradients(lambda: F.sum(F.mul(lin(z), target)), list(lin.named_parameters()), n_samples=60, rng=r)
    assert max(x.max_rel_error for x in res) < 1e-4


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_variant_dimensions(variant):
    cfg = variant_config(variant)
    dim, heads, agg = VARIANTS[variant]
    assert cfg.tags.word_dim == dim and cfg.tags.heads == heads and cfg.tags.aggregation == agg
    assert cfg.contrastive_dim == (dim if agg == "mean" else 1152)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_variant():
    with pytest.raises(ValueError):
        variant_config("w2v-64-2h")


# -- tag side --------------------------------------------------------------------

def _attention(heads, dim=8, out=6, seed=0):
    att = TagAttention(AttentionConfig(word_dim=dim, heads=heads), out, rngs.stream(seed, "init"))
    att.eval()
    return att


def _set(n_valid, dim=8, total=10, seed=0):
    r = np.random.default_rng(seed)
    z = np.zeros((1, total, dim))
    z[0, :n_valid] = r.normal(size=(n_valid, dim))
    mask = np.zeros((1, total), dtype=bool)
    mask[0, :n_valid] = True
    return z, mask


@pytest.mark.parametrize("heads", [1, 4])
def test_attention_rows_sum_to_one_and_ignore_padding(heads, f64):
    att = _attention(heads).astype(np.float64)
    z, mask = _set(4)
    att(Tensor(z), mask)
    a = att.last_attention
    assert a.shape == (1, heads, 10, 10)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    assert np.all(a[..., ~mask[0]] == 0.0)


def test_single_tag_closed_form(f64):
    att = _attention(4).astype(np.float64)
    z, mask = _set(1)
    phi = att(Tensor(z), mask).data[0]
    v = z[0, 0] @ att.value.weight.data + att.value.bias.data
    o = v @ att.out.weight.data + att.out.bias.data
    np.testing.assert_allclose(phi, _layer_norm(o), atol=1e-10)
    assert np.all(att.last_attention[0, :, 0, 0] == 1.0)


def test_zero_query_key_gives_mean_of_values(f64):
    att = _attention(1).astype(np.float64)
    for lin in (att.query, att.key):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    z, mask = _set(3)
    phi = att(Tensor(z), mask).data[0]
    np.testing.assert_allclose(att.last_attention[0, 0, :3, :3], 1 / 3, atol=1e-12)
    v = z[0, :3] @ att.value.weight.data + att.value.bias.data
    o = np.repeat(v.mean(0, keepdims=True), 3, 0) @ att.out.weight.data + att.out.bias.data
    np.testing.assert_allclose(phi, _layer_norm(o.sum(0)), atol=1e-10)


@pytest.mark.parametrize("variant", ["w2v-128-1h", "w2v-128-4h", "w2v-128-mean"])
def test_padding_row_invariance(variant, f64):
    m = AlignmentModel(variant_config(variant), seed=0).astype(np.float64).eval()
    z, mask = _set(3, dim=128)
    with no_grad():
        padded = m.attend_tags(z, mask).data
        unpadded = m.attend_tags(z[:, :3], mask[:, :3]).data
    np.testing.assert_allclose(padded, unpadded, atol=1e-6)


_perm_models = {}


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["w2v-128-1h", "w2v-128-4h", "w2v-128-mean"]), st.integers(1, 10),
       st.integers(0, 2**31 - 1), st.randoms(use_true_random=False))
def test_permutation_invariance_exact(variant, n_valid, seed, rnd):
    if variant not in _perm_models:
        _perm_models[variant] = AlignmentModel(variant_config(variant), seed=0).eval()
    m = _perm_models[variant]
    z, mask = _set(n_valid, dim=128, seed=seed)
    z = z.astype(np.float32)
    perm = list(range(10))
    rnd.shuffle(perm)
    with no_grad():
        a = m.attend_tags(z, mask).data
        b = m.attend_tags(z[:, perm], mask[:, perm]).data
    assert np.array_equal(a, b)


def test_mean_variant_is_layer_norm_of_mean(f64):
    mean = TagMean(AttentionConfig(word_dim=8, aggregation="mean")).astype(np.float64).eval()
    z, mask = _set(4)
    np.testing.assert_allclose(mean(Tensor(z), mask).data[0], _layer_norm(z[0, :4].mean(0)), atol=1e-12)


def test_zero_valid_tags_rejected(model):
    with pytest.raises(ValueError):
        model.attend_tags(np.zeros((1, 10, 128), dtype=np.float32), np.zeros((1, 10), dtype=bool))


def test_forward_round_trip(model):
    z, mask = _set(2, dim=128)
    with no_grad():
        xh, phi_a, phi_w, z_a = model(_patches(1), z.astype(np.float32), mask)
    assert xh.shape == (1, 96, 96) and phi_a.shape == phi_w.shape == (1, 1152) and z_a.shape == (1, 1152)


def test_seeded_construction_is_reproducible():
    a = AlignmentModel(variant_config("w2v-128-4h"), seed=7).state_dict()
    b = AlignmentModel(variant_config("w2v-128-4h"), seed=7).state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
