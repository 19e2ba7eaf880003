"""Synthetic two-domain identity data, CSV I/O, and the PK batch sampler."""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass

import numpy as np

from .tensor import spawn_rngs

HIDDEN = -1
SPLITS = ("train", "query", "gallery")
# the only module allowed to read hidden target-train identities
_HIDDEN_READERS = frozenset({"sguda.evaluation"})


class LabelLeakError(PermissionError):
    """Hidden target-train identities were requested outside evaluation code."""


class SchemaError(ValueError):
    pass


class DomainDataset:
    """Rows of features with identity, camera, domain and split metadata.

    ``identity`` is ``-1`` for rows whose label is hidden (target train).
    The hidden labels themselves are only reachable through
    :meth:`hidden_identities`, which refuses callers other than the
    evaluation module.
    """

    def __init__(self, features, identity, camera, domain: str, split, hidden_identity=None):
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        n = len(self.features)
        self.identity = np.asarray(identity, dtype=np.int64).reshape(n)
        self.camera = np.asarray(camera, dtype=np.int64).reshape(n)
        if isinstance(split, str):
            split = [split] * n
        self.split = np.asarray(split, dtype=object).reshape(n)
        bad = set(self.split) - set(SPLITS)
        if bad:
            raise SchemaError(f"unknown split values {sorted(bad)}")
        self.domain = domain
        self._hidden = None if hidden_identity is None else np.asarray(hidden_identity, dtype=np.int64).reshape(n)
        for a in (self.features, self.identity, self.camera, self.split):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    def __repr__(self) -> str:
        return f"DomainDataset(domain={self.domain!r}, n={len(self)}, dim={self.dim})"

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_hidden(self) -> bool:
        return self._hidden is not None

    def hidden_identities(self) -> np.ndarray:
        caller = sys._getframe(1).f_globals.get("__name__", "")
        if caller not in _HIDDEN_READERS:
            raise LabelLeakError(f"hidden identities are evaluation-only (requested from {caller!r})")
        if self._hidden is None:
            raise LookupError("this dataset carries no hidden identities")
        return self._hidden.copy()

    def select(self, split: str) -> "DomainDataset":
        idx = np.flatnonzero(self.split == split)
        return self.take(idx)

    def take(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        hidden = None if self._hidden is None else self._hidden[idx]
        return DomainDataset(self.features[idx], self.identity[idx], self.camera[idx], self.domain,
                             self.split[idx], hidden)

    def equals(self, other: "DomainDataset") -> bool:
        return (self.domain == other.domain
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.identity, other.identity)
                and np.array_equal(self.camera, other.camera)
                and list(self.split) == list(other.split))


def concat(datasets) -> DomainDataset:
    datasets = list(datasets)
    domain = datasets[0].domain
    hidden = None
    if any(d.has_hidden for d in datasets):
        hidden = np.concatenate([d._hidden if d.has_hidden else d.identity for d in datasets])
    return DomainDataset(np.vstack([d.features for d in datasets]),
                         np.concatenate([d.identity for d in datasets]),
                         np.concatenate([d.camera for d in datasets]), domain,
                         np.concatenate([d.split for d in datasets]), hidden)


@dataclass
class SynthConfig:
    num_source_ids: int = 100
    num_target_ids: int = 80
    num_target_test_ids: int = 80
    samples_per_id: int = 20
    query_per_id: int = 2
    gallery_per_id: int = 8
    num_cameras: int = 4
    latent_dim: int = 16
    input_dim: int = 32
    centroid_std: float = 1.0
    domain_shift: float = 1.0
    shift_mixing: float = 0.25
    nuisance_dim: int = 4
    camera_noise_std: float = 1.0
    pose_noise_std: float = 0.5
    sample_noise_std: float = 0.2
    target_identity_offset: int | None = None
    seed: int = 42

    def __post_init__(self):
        for name in ("num_source_ids", "num_target_ids", "num_target_test_ids", "samples_per_id",
                     "latent_dim", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_cameras < 2:
            raise ValueError("num_cameras must be >= 2")
        if not 0 <= self.nuisance_dim <= self.input_dim:
            raise ValueError("nuisance_dim must lie in [0, input_dim]")
        for name in ("centroid_std", "domain_shift", "shift_mixing", "camera_noise_std", "pose_noise_std", "sample_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class SynthDomains:
    source: DomainDataset
    target: DomainDataset  # train + query + gallery rows

    @property
    def target_train(self) -> DomainDataset:
        return self.target.select("train")

    @property
    def query(self) -> DomainDataset:
        return self.target.select("query")

    @property
    def gallery(self) -> DomainDataset:
        return self.target.select("gallery")


def generate(cfg: SynthConfig, reveal_target_train: bool = False) -> SynthDomains:
    """Deterministic synthetic source/target identity data.

    Each global identity index owns a latent centroid, mapped into feature
    space by an affine embedding shared by both domains. Camera and viewpoint
    variation live in a low-dimensional nuisance subspace that is also shared:
    every (domain, camera) pair gets its own offset inside it
    (``camera_noise_std``) and every sample a further random displacement
    along it (``pose_noise_std``). Isotropic noise (``sample_noise_std``) is
    added last. Target samples then go through a random affine shift whose
    size scales with ``cfg.domain_shift``.

    Source identities use indices ``0..num_source_ids-1``; target training
    identities start at ``target_identity_offset`` (default: right after the
    source ones, i.e. disjoint); target query/gallery identities follow the
    target training ones.
    """
    if cfg.query_per_id < 1 or cfg.gallery_per_id < 1:
        raise ValueError("query_per_id and gallery_per_id must be >= 1")
    if cfg.query_per_id > cfg.num_cameras:
        raise ValueError("query_per_id cannot exceed num_cameras (queries use distinct cameras)")
    if cfg.gallery_per_id < 2:
        raise ValueError("gallery_per_id must be >= 2 so every query has a cross-camera match")
    if cfg.samples_per_id < 2:
        raise ValueError("samples_per_id must be >= 2")

    r_map, r_id, r_cam, r_src, r_tgt, r_shift = spawn_rngs(cfg.seed, 6)
    offset = cfg.num_source_ids if cfg.target_identity_offset is None else cfg.target_identity_offset
    total_ids = max(cfg.num_source_ids, offset + cfg.num_target_ids + cfg.num_target_test_ids)
    centroids = r_id.standard_normal((total_ids, cfg.latent_dim)) * cfg.centroid_std
    embed = r_map.standard_normal((cfg.latent_dim, cfg.input_dim)) / np.sqrt(cfg.latent_dim)
    embed_bias = r_map.standard_normal(cfg.input_dim) * 0.1
    nuisance = np.linalg.qr(r_map.standard_normal((cfg.input_dim, max(cfg.nuisance_dim, 1))))[0].T
    nuisance = nuisance[: cfg.nuisance_dim] * np.sqrt(cfg.input_dim / max(cfg.nuisance_dim, 1))
    cam_offsets = {d: r_cam.standard_normal((cfg.num_cameras, cfg.nuisance_dim)) @ nuisance * cfg.camera_noise_std
                   for d in ("source", "target")}
    # per-feature gain and offset scale with domain_shift; the feature-mixing
    # part is damped by shift_mixing so identity structure survives the shift
    gains = np.exp(0.5 * cfg.domain_shift * r_shift.standard_normal(cfg.input_dim))
    mixing = cfg.shift_mixing * cfg.domain_shift * r_shift.standard_normal(
        (cfg.input_dim, cfg.input_dim)) / np.sqrt(cfg.input_dim)
    shift_m = (np.eye(cfg.input_dim) + mixing) * gains
    shift_b = cfg.domain_shift * r_shift.standard_normal(cfg.input_dim)

    def draw(rng, domain, ids, per_id, cam_pattern):
        ident = np.repeat(ids, per_id)
        cams = np.concatenate([cam_pattern(rng, per_id) for _ in ids]) if len(ids) else np.zeros(0, int)
        pose = rng.standard_normal((len(ident), cfg.nuisance_dim)) @ nuisance * cfg.pose_noise_std
        noise = rng.standard_normal((len(ident), cfg.input_dim)) * cfg.sample_noise_std
        x = centroids[ident] @ embed + embed_bias + cam_offsets[domain][cams] + pose + noise
        if domain == "target":
            x = x @ shift_m + shift_b
        return x, ident, cams

    c = cfg.num_cameras

    def cyclic(rng, n):
        start = rng.integers(c)
        return (start + np.arange(n)) % c

    def distinct(rng, n):
        return rng.permutation(c)[:n]

    xs, ys, cs = draw(r_src, "source", np.arange(cfg.num_source_ids), cfg.samples_per_id, cyclic)
    source = DomainDataset(xs, ys, cs, "source", "train")

    train_ids = np.arange(offset, offset + cfg.num_target_ids)
    test_ids = np.arange(offset + cfg.num_target_ids, offset + cfg.num_target_ids + cfg.num_target_test_ids)
    xt, yt, ct = draw(r_tgt, "target", train_ids, cfg.samples_per_id, cyclic)
    xq, yq, cq = draw(r_tgt, "target", test_ids, cfg.query_per_id, distinct)
    xg, yg, cg = draw(r_tgt, "target", test_ids, cfg.gallery_per_id, cyclic)
    visible_train = yt if reveal_target_train else np.full_like(yt, HIDDEN)
    target = DomainDataset(
        np.vstack([xt, xq, xg]),
        np.concatenate([visible_train, yq, yg]),
        np.concatenate([ct, cq, cg]),
        "target",
        ["train"] * len(yt) + ["query"] * len(yq) + ["gallery"] * len(yg),
        hidden_identity=np.concatenate([yt, yq, yg]),
    )
    return SynthDomains(source, target)


# --- CSV -------------------------------------------------------------------

_META = ["domain", "split", "identity", "camera"]


def save_csv(dataset: DomainDataset, path) -> None:
    """Header ``domain,split,identity,camera,f0..f{D-1}``; floats at 17 significant digits."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_META + [f"f{j}" for j in range(dataset.dim)])
        for i in range(len(dataset)):
            w.writerow([dataset.domain, dataset.split[i], int(dataset.identity[i]), int(dataset.camera[i])]
                       + [format(v, ".17g") for v in dataset.features[i]])


def load_csv(path) -> DomainDataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in _META if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        if header[:4] != _META:
            raise SchemaError(f"{path}: header must start with {','.join(_META)}")
        fcols = header[4:]
        if not fcols or fcols != [f"f{j}" for j in range(len(fcols))]:
            raise SchemaError(f"{path}: feature columns must be f0..f{{D-1}}")
        width = len(header)
        domains, splits, ids, cams, feats = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise SchemaError(f"{path}: line {lineno}: expected {width} columns, got {len(row)}")
            try:
                ids.append(int(row[2]))
                cams.append(int(row[3]))
                feats.append([float(v) for v in row[4:]])
            except ValueError as exc:
                raise SchemaError(f"{path}: line {lineno}: {exc}") from None
            if row[1] not in SPLITS:
                raise SchemaError(f"{path}: line {lineno}: unknown split {row[1]!r}")
            domains.append(row[0])
            splits.append(row[1])
    if len(set(domains)) > 1:
        raise SchemaError(f"{path}: mixed domains {sorted(set(domains))}")
    dim = len(fcols)
    return DomainDataset(np.array(feats, dtype=np.float64).reshape(len(feats), dim), ids, cams,
                         domains[0] if domains else "source", splits)


# --- PK sampling -----------------------------------------------------------

@dataclass
class PkSamplerConfig:
    P: int = 16
    K: int = 4
    batches_per_epoch: int = 50

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError(f"PK sampling needs P >= 2 and K >= 2, got P={self.P}, K={self.K}")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


class PkSampler:
    """Identity-balanced batches of P labels x K indices.

    Labels are visited in successive shuffled passes, so no label is drawn a
    (j+2)-th time while another label still waits for its (j+1)-th draw.
    Labels with fewer than K rows contribute all their rows plus draws with
    replacement.
    """

    def __init__(self, labels, cfg: PkSamplerConfig, rng: np.random.Generator):
        labels = np.asarray(labels)
        self.cfg = cfg
        self.rng = rng
        self.labels = np.unique(labels)
        if len(self.labels) < cfg.P:
            raise ValueError(f"PK sampler needs at least P={cfg.P} distinct labels, got {len(self.labels)}")
        self.members = {lab: np.flatnonzero(labels == lab) for lab in self.labels}
        self._pending: list = []

    def _pick_labels(self) -> list:
        chosen = self._pending[: self.cfg.P]
        self._pending = self._pending[self.cfg.P:]
        if len(chosen) < self.cfg.P:
            fresh = list(self.labels[self.rng.permutation(len(self.labels))])
            taken = set(chosen)
            extra = [lab for lab in fresh if lab not in taken][: self.cfg.P - len(chosen)]
            used = set(extra)
            self._pending = [lab for lab in fresh if lab not in used]
            chosen = chosen + extra
        return chosen

    def next_batch(self) -> np.ndarray:
        out = []
        k = self.cfg.K
        for lab in self._pick_labels():
            rows = self.members[lab]
            if len(rows) >= k:
                out.append(self.rng.choice(rows, size=k, replace=False))
            else:
                extra = self.rng.choice(rows, size=k - len(rows), replace=True)
                out.append(np.concatenate([self.rng.permutation(rows), extra]))
        return np.concatenate(out)

    def epoch(self, num_batches: int | None = None):
        for _ in range(num_batches or self.cfg.batches_per_epoch):
            yield self.next_batch()


def pk_batches(labels, cfg: PkSamplerConfig, rng, num_batches: int | None = None):
    return PkSampler(labels, cfg, rng).epoch(num_batches)
