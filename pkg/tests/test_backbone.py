import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import numeric_grad, rel_err
from tsrag.backbone import (
    BackboneConfig,
    backbone_from_bytes,
    encode,
    init_backbone,
    load_backbone,
    pretrain_backbone,
    project,
    project_grad_W,
    save_backbone,
)
from tsrag.core import generate_motif_corpus, make_pairs
from tsrag.errors import DimMismatchError, FormatError

CFG = BackboneConfig(T=64, L=8, P=16, d=8, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(T=65, P=16)
    with pytest.raises(ValueError):
        BackboneConfig(d=4)
    with pytest.raises(ValueError):
        BackboneConfig(L=0)


def test_zero_context_zero_embedding():
    p = init_backbone(CFG)
    np.testing.assert_array_equal(encode(np.zeros(CFG.T), p), 0.0)


def test_encode_deterministic(rng):
    x = rng.normal(size=CFG.T)
    a = encode(x, init_backbone(CFG))
    b = encode(x, init_backbone(CFG))
    assert a.tobytes() == b.tobytes()


def test_patch_permutation_invariance(rng):
    p = init_backbone(CFG)
    x = rng.normal(size=CFG.T)
    patches = x.reshape(-1, CFG.P)
    y = patches[rng.permutation(len(patches))].reshape(-1)
    np.testing.assert_allclose(encode(x, p), encode(y, p), atol=1e-14)


def test_encode_rejects_wrong_length():
    with pytest.raises(DimMismatchError):
        encode(np.zeros(CFG.T + 1), init_backbone(CFG))


def test_batch_matches_single(rng):
    p = init_backbone(CFG)
    X = rng.normal(size=(5, CFG.T))
    np.testing.assert_allclose(encode(X, p), np.stack([encode(x, p) for x in X]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, CFG.T, elements=st.floats(-1e3, 1e3)))
def test_encode_range_and_project_shape(x):
    p = init_backbone(CFG)
    e = encode(x, p)
    assert np.all(np.abs(e) <= 1.0) and np.all(np.isfinite(e))
    assert project(e, p).shape == (CFG.L,)


def test_project_affine(rng):
    p = init_backbone(CFG)
    np.testing.assert_array_equal(project(np.zeros(CFG.d), p), p.head_b)
    e = rng.normal(size=CFG.d)
    np.testing.assert_allclose(project(2 * e, p), 2 * project(e, p), atol=1e-14)
    with pytest.raises(DimMismatchError):
        project(np.zeros(CFG.d + 1), p)


def test_project_grad_W_matches_fd(rng):
    p = init_backbone(CFG)
    e, u = rng.normal(size=CFG.d), rng.normal(size=CFG.L)
    W = p.head_W.copy()
    p.head_W = W

    def f():
        return project(e, p)

    assert rel_err(project_grad_W(e, u), numeric_grad(f, W, u)) < 1e-6


def noiseless_pairs():
    corpus = generate_motif_corpus(2, 4, 600, motif_bank_size=1, noise_std=0.0, max_motifs=1, kinds=("sine",))
    return [q for s in corpus for q in make_pairs(s, CFG.T, CFG.L, 8)]


def test_pretrain_loss_decreases_and_freezes():
    params = pretrain_backbone(noiseless_pairs(), CFG, epochs=10, lr=3e-3, batch_size=32)
    curve = np.array(params.loss_curve)
    assert len(curve) == 10
    assert np.all(np.diff(curve) < 0), curve
    assert params.frozen
    with pytest.raises(ValueError):
        params.head_W[0, 0] = 1.0


def test_pretrain_deterministic():
    pairs = noiseless_pairs()
    a = pretrain_backbone(pairs, CFG, epochs=3)
    b = pretrain_backbone(pairs, CFG, epochs=3)
    assert a.to_bytes() == b.to_bytes()


def test_pretrain_empty():
    with pytest.raises(ValueError):
        pretrain_backbone([], CFG)


def test_checkpoint_roundtrip(tmp_path, small_backbone):
    path = tmp_path / "b.tsrb"
    save_backbone(small_backbone, path)
    loaded = load_backbone(path, small_backbone.config)
    assert loaded.frozen
    assert loaded.to_bytes() == path.read_bytes()
    assert loaded.fingerprint == small_backbone.fingerprint


def test_checkpoint_corruption(small_backbone):
    blob = small_backbone.to_bytes()
    with pytest.raises(FormatError, match="magic"):
        backbone_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        backbone_from_bytes(blob[:-1])
    with pytest.raises(FormatError, match="version"):
        backbone_from_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])


def test_checkpoint_dim_mismatch_names_both(small_backbone):
    other = BackboneConfig(T=small_backbone.config.T, L=small_backbone.config.L, P=small_backbone.config.P, d=32)
    with pytest.raises(DimMismatchError) as exc:
        backbone_from_bytes(small_backbone.to_bytes(), other)
    assert "d=16" in str(exc.value) and "d=32" in str(exc.value)
