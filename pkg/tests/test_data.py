from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sguda import evaluation
from sguda.data import (DomainDataset, LabelLeakError, PkSampler, PkSamplerConfig, SchemaError, SynthConfig,
                        generate, load_csv, pk_batches, save_csv)
from sguda.tensor import make_rng

SMALL = SynthConfig(num_source_ids=12, num_target_ids=10, num_target_test_ids=6, samples_per_id=6,
                    query_per_id=2, gallery_per_id=4, seed=3)


@pytest.mark.trivial
def test_degenerate_config_same_identity_same_features():
    cfg = SynthConfig(num_source_ids=10, num_target_ids=10, num_target_test_ids=2, samples_per_id=4,
                      domain_shift=0.0, camera_noise_std=0.0, pose_noise_std=0.0, sample_noise_std=0.0,
                      target_identity_offset=0, seed=1)
    dom = generate(cfg, reveal_target_train=True)
    src, tt = dom.source, dom.target_train
    for i in range(10):
        a = src.features[src.identity == i]
        b = tt.features[tt.identity == i]
        assert np.array_equal(a[0], b[0])


@pytest.mark.trivial
def test_generation_deterministic():
    a, b = generate(SMALL), generate(SMALL)
    for x, y in ((a.source, b.source), (a.target, b.target)):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.identity.tobytes() == y.identity.tobytes()
        assert x.camera.tobytes() == y.camera.tobytes()
    c = generate(SynthConfig(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a.source.features, c.source.features)


@pytest.mark.parametrize("shift", [0.5, 1.0, 2.0])
def test_identity_means_shift_by_at_least_configured_magnitude(shift):
    cfg = SynthConfig(num_source_ids=40, num_target_ids=40, num_target_test_ids=2, target_identity_offset=0,
                      domain_shift=shift, seed=11)
    dom = generate(cfg, reveal_target_train=True)
    src, tt = dom.source, dom.target_train
    gaps = [np.linalg.norm(tt.features[tt.identity == i].mean(0) - src.features[src.identity == i].mean(0))
            for i in range(40)]
    assert np.mean(gaps) >= shift


def test_splits_and_sizes():
    dom = generate(SMALL)
    assert len(dom.source) == 12 * 6
    assert len(dom.target_train) == 10 * 6
    assert len(dom.query) == 6 * 2 and len(dom.gallery) == 6 * 4
    assert set(dom.source.split) == {"train"}
    # hidden labels on target train, visible on query/gallery
    assert np.all(dom.target_train.identity == -1)
    assert np.all(dom.query.identity >= 0)
    # target test identities are unseen during training
    revealed = generate(SMALL, reveal_target_train=True).target_train
    assert not set(dom.query.identity) & set(revealed.identity)
    assert set(dom.query.identity) == set(dom.gallery.identity)


@given(st.integers(0, 10_000), st.integers(2, 5))
def test_query_protocol_feasible(seed, cams):
    cfg = SynthConfig(num_source_ids=3, num_target_ids=3, num_target_test_ids=5, samples_per_id=3,
                      query_per_id=2, gallery_per_id=2, num_cameras=cams, seed=seed)
    dom = generate(cfg)
    q, g = dom.query, dom.gallery
    for i in range(len(q)):
        ok = (g.identity == q.identity[i]) & (g.camera != q.camera[i])
        assert ok.any()


def test_infeasible_split_errors():
    with pytest.raises(ValueError):
        generate(SynthConfig(query_per_id=5, num_cameras=4))
    with pytest.raises(ValueError):
        generate(SynthConfig(gallery_per_id=1))
    with pytest.raises(ValueError):
        SynthConfig(num_cameras=1)
    with pytest.raises(ValueError):
        SynthConfig(camera_noise_std=-1)


def test_hidden_identities_guard():
    dom = generate(SMALL)
    tt = dom.target_train
    with pytest.raises(LabelLeakError):
        tt.hidden_identities()
    with pytest.raises(LabelLeakError):
        getattr(tt, "hidden_identities")()
    # the evaluation module may read them
    diag = evaluation.cluster_diagnostics(
        evaluation.PseudoLabelSet(np.zeros(len(tt), dtype=int), 1), tt)
    assert "nmi" in diag


def test_arrays_read_only():
    dom = generate(SMALL)
    with pytest.raises(ValueError):
        dom.source.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        dom.source.identity[0] = 5


@pytest.mark.trivial
def test_csv_round_trip(tmp_path):
    dom = generate(SMALL)
    for ds in (dom.source, dom.target):
        save_csv(ds, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        assert back.equals(ds)


def test_csv_header(tmp_path):
    dom = generate(SMALL)
    save_csv(dom.source, tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "domain,split,identity,camera," + ",".join(f"f{j}" for j in range(32))


@pytest.mark.trivial
def test_csv_bad_line_cites_line_number(tmp_path):
    lines = ["domain,split,identity,camera,f0,f1"]
    lines += [f"source,train,{i},0,0.5,1.5" for i in range(5)]
    lines.append("source,train,9,0,0.5")  # line 7
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="line 7"):
        load_csv(tmp_path / "bad.csv")


def test_csv_missing_columns(tmp_path):
    (tmp_path / "m.csv").write_text("domain,split,camera,f0\nsource,train,0,1.0\n")
    with pytest.raises(SchemaError, match="identity"):
        load_csv(tmp_path / "m.csv")


@pytest.mark.trivial
def test_csv_handwritten(tmp_path):
    (tmp_path / "h.csv").write_text(
        "domain,split,identity,camera,f0,f1\n"
        "target,train,-1,0,0.25,-3\n"
        "target,query,4,1,1e-3,2.5\n"
        "target,gallery,4,2,7,0.1\n")
    ds = load_csv(tmp_path / "h.csv")
    assert ds.domain == "target"
    assert list(ds.split) == ["train", "query", "gallery"]
    assert list(ds.identity) == [-1, 4, 4]
    assert list(ds.camera) == [0, 1, 2]
    assert ds.features.tolist() == [[0.25, -3.0], [0.001, 2.5], [7.0, 0.1]]


# --- PK sampler -------------------------------------------------------------------

def test_batch_size_64():
    assert PkSamplerConfig(16, 4).batch_size == 64


def test_pk_batch_structure(rng):
    labels = np.repeat(np.arange(20), 5)
    for b in pk_batches(labels, PkSamplerConfig(4, 3, 10), rng):
        c = Counter(labels[b].tolist())
        assert len(c) == 4 and set(c.values()) == {3}


@pytest.mark.trivial
def test_pk_replacement_covers_small_label(rng):
    labels = np.array([0, 0] + [1] * 6 + [2] * 6)
    s = PkSampler(labels, PkSamplerConfig(3, 4), rng)
    for _ in range(5):
        b = s.next_batch()
        mine = b[labels[b] == 0]
        assert len(mine) == 4 and set(mine.tolist()) == {0, 1}


def test_pk_too_few_labels(rng):
    with pytest.raises(ValueError):
        PkSampler(np.array([0, 0, 1, 1]), PkSamplerConfig(3, 2), rng)
    with pytest.raises(ValueError):
        PkSamplerConfig(1, 4)


@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(2, 8), st.integers(2, 4), st.integers(1, 40))
def test_pk_fairness_counting(seed, n_labels, P, K, n_batches):
    if P > n_labels:
        return
    r = make_rng(seed)
    sizes = r.integers(1, 7, n_labels)
    labels = np.repeat(np.arange(n_labels), sizes)
    counts = Counter({lab: 0 for lab in range(n_labels)})
    for b in pk_batches(labels, PkSamplerConfig(P, K, n_batches), r):
        per = Counter(labels[b].tolist())
        assert len(per) == P and set(per.values()) == {K}
        for lab in per:
            counts[lab] += 1
        # no label is drawn twice more than another at any point
        assert max(counts.values()) - min(counts.values()) <= 1
    total = n_batches * P
    assert sum(counts.values()) == total


def test_pk_deterministic():
    labels = np.repeat(np.arange(10), 3)
    a = [b.tolist() for b in pk_batches(labels, PkSamplerConfig(4, 2, 7), make_rng(5))]
    b = [b.tolist() for b in pk_batches(labels, PkSamplerConfig(4, 2, 7), make_rng(5))]
    assert a == b


def test_dataset_schema_errors():
    with pytest.raises(SchemaError):
        DomainDataset(np.zeros((2, 2)), [0, 1], [0, 0], "source", ["train", "validation"])
