import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sguda.encoder import (ClassifierHead, Encoder, EncoderConfig, init_two_branch, load_checkpoint,
                           save_checkpoint)
from sguda.gradcheck import check_joint
from sguda.losses import TripletConfig, domain_step
from sguda.tensor import make_rng

CFG = EncoderConfig(input_dim=6, block_dims=(8, 8, 8), embed_dim=4, shared_depth=1)


def two_branch(s=1, seed=0, bn=True):
    cfg = EncoderConfig(input_dim=6, block_dims=(8, 8, 8), embed_dim=4, shared_depth=s, domain_specific_bn=bn)
    r = make_rng(seed)
    base = Encoder(cfg, r)
    # give the source slots non-trivial statistics
    base.forward(r.standard_normal((10, 6)) * 2 + 1, "source", "train")
    head = ClassifierHead(cfg.embed_dim, 5, r)
    return init_two_branch(base, cfg, head), base, r


def ids(params):
    return {id(p) for p in params}


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(block_dims=(8, 8), shared_depth=3)
    with pytest.raises(ValueError):
        EncoderConfig(shared_depth=-1)


@pytest.mark.parametrize("s", [0, 1, 2, 3])
@pytest.mark.trivial
def test_init_paths_identical_and_match_base(s):
    enc, base, r = two_branch(s)
    x = r.standard_normal((7, 6))
    es = enc.forward(x, "source", "eval")
    et = enc.forward(x, "target", "eval")
    assert np.array_equal(es, et)
    assert np.array_equal(es, base.forward(x, "source", "eval"))


@pytest.mark.trivial
def test_boundary_sharing():
    enc0, _, _ = two_branch(0)
    assert enc0.shared_params() == []
    assert not ids(enc0.trainable_parameters("source")) & ids(enc0.trainable_parameters("target"))
    enc3, _, _ = two_branch(3)
    assert enc3.aliased
    assert enc3.branches["source"] is enc3.branches["target"]
    src = ids(enc3.trainable_parameters("source", include_head=False))
    assert src == ids(enc3.trainable_parameters("target", include_head=False))
    enc3.reinit_target_head(4, make_rng(1))
    diff = ids(enc3.trainable_parameters("source")) ^ ids(enc3.trainable_parameters("target"))
    assert diff == ids(enc3.heads["source"].params() + enc3.heads["target"].params())


@pytest.mark.parametrize("s", [0, 1, 2, 3])
@pytest.mark.trivial
def test_union_counting(s):
    enc, _, _ = two_branch(s)
    enc.reinit_target_head(3, make_rng(1))
    union = ids(enc.trainable_parameters("source")) | ids(enc.trainable_parameters("target"))
    branch_t = [] if enc.aliased else enc.branch_params("target")
    heads = enc.heads["source"].params() + enc.heads["target"].params()
    expected = len(enc.shared_params()) + len(enc.branch_params("source")) + len(branch_t) + len(heads)
    assert len(union) == expected == len(ids(enc.all_parameters()))


def test_shared_param_count_monotone_in_depth():
    counts = []
    for s in range(4):
        enc, _, _ = two_branch(s)
        shared = ids(enc.trainable_parameters("source", False)) & ids(enc.trainable_parameters("target", False))
        counts.append(len(shared))
    assert counts == sorted(counts)


@pytest.mark.trivial
def test_perturb_target_branch_isolated():
    enc, _, r = two_branch(1)
    x = r.standard_normal((5, 6))
    es, et = enc.forward(x, "source", "eval"), enc.forward(x, "target", "eval")
    enc.branch_params("target")[0].data += 0.5
    assert np.array_equal(enc.forward(x, "source", "eval"), es)
    assert not np.allclose(enc.forward(x, "target", "eval"), et)


def test_target_bn_seeded_from_source():
    enc, base, _ = two_branch(2)
    for layer in enc.bn_layers():
        assert np.array_equal(layer.stats["target"].mean, layer.stats["source"].mean)


@pytest.mark.trivial
def test_eval_embeddings_unit_norm_and_distinct():
    enc, _, r = two_branch(1)
    e = enc.forward(r.standard_normal((6, 6)), "target", "eval")
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)
    assert len({row.tobytes() for row in e}) == 6
    raw = enc.forward(r.standard_normal((6, 6)), "target", "train")
    assert not np.allclose(np.linalg.norm(raw, axis=1), 1.0)


@pytest.mark.trivial
def test_aliased_eval_identical_across_domains():
    enc, _, r = two_branch(3)
    x = r.standard_normal((4, 6))
    assert np.array_equal(enc.forward(x, "source", "eval"), enc.forward(x, "target", "eval"))


def test_shape_mismatch():
    enc, _, _ = two_branch(1)
    with pytest.raises(ValueError):
        enc.forward(np.zeros((3, 5)), "source", "eval")
    other = Encoder(EncoderConfig(input_dim=6, block_dims=(8, 8), embed_dim=4, shared_depth=1), make_rng(0))
    with pytest.raises(ValueError):
        init_two_branch(other, CFG)


@pytest.mark.trivial
def test_head_reinit():
    enc, _, _ = two_branch(1)
    ws = enc.heads["source"].weight.data.copy()
    h1 = enc.reinit_target_head(500, make_rng(9)).weight.data.copy()
    h2 = enc.reinit_target_head(500, make_rng(9)).weight.data.copy()
    assert h1.shape == (4, 500)
    assert np.array_equal(h1, h2)
    assert enc.heads["source"].weight.data.tobytes() == ws.tobytes()
    with pytest.raises(ValueError):
        enc.reinit_target_head(1, make_rng(0))


def test_head_init_distribution():
    w = ClassifierHead(64, 400, make_rng(3), std=0.001).weight.data
    assert abs(w.mean()) < 1e-4
    assert abs(w.std() - 0.001) < 5e-5


def test_gradient_flow_isolation():
    enc, _, r = two_branch(1)
    enc.reinit_target_head(3, r)
    y = np.repeat(np.arange(3), 3)
    for p in enc.all_parameters():
        p.zero_grad()
    domain_step(enc, r.standard_normal((9, 6)), y, "target", TripletConfig())
    for p in enc.branch_params("source") + enc.heads["source"].params():
        assert not p.grad.any()
    assert all(p.grad.any() for p in enc.shared_params() if p.name.endswith("weight"))
    for p in enc.all_parameters():
        p.zero_grad()
    domain_step(enc, r.standard_normal((9, 6)), y, "source", TripletConfig())
    for p in enc.branch_params("target") + enc.heads["target"].params():
        assert not p.grad.any()


@pytest.mark.parametrize("s,bn", [(0, True), (1, True), (2, True), (1, False)])
def test_full_network_gradcheck(s, bn):
    for seed in range(3):
        (res,) = check_joint(make_rng(seed), shared_depth=s, domain_specific_bn=bn)
        assert res.ok, res


@pytest.mark.parametrize("s,bn", [(0, True), (2, True), (3, True), (1, False)])
def test_checkpoint_round_trip_bit_exact(tmp_path, s, bn):
    enc, _, r = two_branch(s, bn=bn)
    enc.reinit_target_head(7, r)
    for p in enc.all_parameters():
        p.data += r.standard_normal(p.data.shape)
    save_checkpoint(enc, tmp_path / "a.ckpt", extra={"note": "x"})
    back, extra = load_checkpoint(tmp_path / "a.ckpt")
    assert extra == {"note": "x"}
    x = r.standard_normal((5, 6))
    for d in ("source", "target"):
        assert np.array_equal(back.forward(x, d, "eval"), enc.forward(x, d, "eval"))
    save_checkpoint(back, tmp_path / "b.ckpt", extra={"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


@given(st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_single_encoder_round_trip(s, seed):
    cfg = EncoderConfig(input_dim=3, block_dims=(4, 4, 4), embed_dim=2, shared_depth=s)
    enc = Encoder(cfg, make_rng(seed))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "e.ckpt")
        save_checkpoint(enc, path)
        back, _ = load_checkpoint(path)
    x = make_rng(seed + 1).standard_normal((3, 3))
    assert np.array_equal(back.forward(x, "source", "eval"), enc.forward(x, "source", "eval"))
