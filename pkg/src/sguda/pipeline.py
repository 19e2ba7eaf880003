"""Source initialisation, the alternating pseudo-label loop, and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import evaluation
from .cluster import (ClusterCollapse, DbscanConfig, PseudoLabelSet, RerankConfig, assign_pseudo_labels,
                      dbscan, eps_from_p, k_reciprocal_distances, kmeans)
from .data import DomainDataset, PkSampler, PkSamplerConfig, SynthConfig, SynthDomains, generate
from .encoder import ClassifierHead, Encoder, EncoderConfig, TwoBranchEncoder, init_two_branch, save_checkpoint
from .evaluation import EvalProtocol, EvalReport
from .losses import TripletConfig, domain_loss, domain_step, joint_loss
from .nn import Adam, LrSchedule
from .tensor import spawn_rngs

log = logging.getLogger(__name__)

MODES = ("source_guided", "target_only", "source_only")
CLUSTERERS = ("dbscan", "kmeans")

# independent RNG streams, one per consumer, so that e.g. drawing source
# batches never perturbs the target sampler
_STREAMS = ("init_model", "init_head", "init_sampler", "uda_source", "uda_target", "target_head", "kmeans")


class PipelineError(RuntimeError):
    def __init__(self, msg, artifacts=None):
        super().__init__(msg)
        self.artifacts = artifacts


@dataclass
class PipelineConfig:
    mode: str = "source_guided"
    clusterer: str = "dbscan"
    n_iter: int = 5
    n_epoch: int = 5
    init_epochs: int = 40
    init_lr: float = 0.00035
    uda_lr: float = 0.001
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] | None = None
    head_std: float = 0.001
    kmeans_k: int = 80
    kmeans_max_iters: int = 100
    seed: int = 42
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    sampler: PkSamplerConfig = field(default_factory=PkSamplerConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    data: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clusterer not in CLUSTERERS:
            raise ValueError(f"clusterer must be one of {CLUSTERERS}, got {self.clusterer!r}")
        if self.n_iter < 1 or self.n_epoch < 1:
            raise ValueError("n_iter and n_epoch must be >= 1")
        if self.init_epochs < 0:
            raise ValueError("init_epochs must be >= 0")
        if self.kmeans_k < 2:
            raise ValueError("kmeans_k must be >= 2")
        if self.lr_decay_epochs is not None:
            self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    def schedule(self) -> LrSchedule:
        decays = self.lr_decay_epochs
        if decays is None:
            decays = (self.init_epochs // 2, self.init_epochs * 7 // 8)
        return LrSchedule(self.init_lr, tuple(decays), self.lr_decay_factor)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d)

    def replace(self, **changes) -> "PipelineConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"dbscan.p": 0.01})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            if leaf not in node:
                raise KeyError(f"unknown config field {path!r}")
            node[leaf] = value
        return PipelineConfig.from_dict(d)


def _build(cls, d: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get(name) if cls is PipelineConfig else None
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    "encoder": EncoderConfig, "triplet": TripletConfig, "sampler": PkSamplerConfig,
    "rerank": RerankConfig, "dbscan": DbscanConfig, "protocol": EvalProtocol, "data": SynthConfig,
}


@dataclass
class InitResult:
    encoder: Encoder
    head: ClassifierHead
    losses: list = field(default_factory=list)
    label_map: dict = field(default_factory=dict)


@dataclass
class RunArtifacts:
    config: dict
    reports: list = field(default_factory=list)  # index 0 is before adaptation
    pseudo_labels: list = field(default_factory=list)
    cluster_counts: list = field(default_factory=list)
    loss_curve: list = field(default_factory=list)
    encoder: TwoBranchEncoder | None = None
    status: str = "ok"

    @property
    def final(self) -> EvalReport:
        return self.reports[-1]

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t, rep in enumerate(self.reports):
            (out / f"report_iter{t}.json").write_text(rep.to_json())
        for t, pl in enumerate(self.pseudo_labels, start=1):
            pl.to_csv(out / f"pseudo_iter{t}.csv")
        with open(out / "loss_curve.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "epoch", "step", "loss", "source_loss", "target_loss"])
            for row in self.loss_curve:
                w.writerow([row[0], row[1], row[2]] + [repr(v) for v in row[3:]])
        summary = {
            "status": self.status,
            "final_mAP": self.final.mAP if self.reports else None,
            "mAP_per_iteration": [r.mAP for r in self.reports],
            "cluster_counts": self.cluster_counts,
        }
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        if self.encoder is not None:
            save_checkpoint(self.encoder, out / "final.ckpt")
        return out


def _rngs(seed: int) -> dict:
    return dict(zip(_STREAMS, spawn_rngs(seed, len(_STREAMS))))


def _compact(labels) -> tuple[np.ndarray, dict]:
    uniq = np.unique(labels)
    mapping = {int(u): j for j, u in enumerate(uniq)}
    return np.array([mapping[int(v)] for v in labels], dtype=np.int64), mapping


def train_init(source: DomainDataset, cfg: PipelineConfig) -> InitResult:
    """Supervised source training of the single-path encoder E0 and its head."""
    rng = _rngs(cfg.seed)
    if (source.identity < 0).any():
        raise ValueError("source training needs labelled rows")
    labels, mapping = _compact(source.identity)
    enc = Encoder(cfg.encoder, rng["init_model"])
    head = ClassifierHead(cfg.encoder.embed_dim, len(mapping), rng["init_head"], std=cfg.head_std,
                          name="head_source")
    sampler = PkSampler(labels, cfg.sampler, rng["init_sampler"])
    params = enc.params() + head.params()
    opt = Adam(lr=cfg.init_lr, weight_decay=cfg.weight_decay)
    schedule = cfg.schedule()
    losses = []
    x = source.features
    for epoch in range(cfg.init_epochs):
        opt.lr = schedule.lr_at(epoch)
        total = 0.0
        for batch in sampler.epoch():
            for p in params:
                p.zero_grad()
            emb = enc.forward(x[batch], "source", "train")
            loss, g_emb, g_head, _ = domain_loss(emb, labels[batch], head.weight.data, cfg.triplet)
            if not np.isfinite(loss):
                raise PipelineError(f"non-finite source loss at init epoch {epoch}")
            head.weight.grad += g_head
            enc.backward(g_emb)
            opt.step(params)
            total += loss
        losses.append(total / cfg.sampler.batches_per_epoch)
    return InitResult(enc, head, losses, mapping)


def cluster_target(features: np.ndarray, cfg: PipelineConfig, rng) -> PseudoLabelSet:
    if cfg.clusterer == "dbscan":
        dist = k_reciprocal_distances(features, cfg.rerank)
        eps = eps_from_p(dist, cfg.dbscan.p)
        return dbscan(dist, eps, cfg.dbscan.min_samples)
    k = min(cfg.kmeans_k, len(features))
    return kmeans(features, k, rng, cfg.kmeans_max_iters)


def run(cfg: PipelineConfig, source: DomainDataset, target: DomainDataset,
        init: InitResult | None = None,
        pseudo_label_hook: Callable | None = None,
        batch_hook: Callable | None = None) -> RunArtifacts:
    """Full alternating procedure for one configuration.

    ``target`` holds the train/query/gallery rows of the target domain.
    ``pseudo_label_hook(t, pseudo)`` may replace the clustering output (test
    seam). ``batch_hook(info)`` receives per-step losses and is the place to
    attach extra objectives.
    """
    rng = _rngs(cfg.seed)
    target_train = target.select("train")
    query, gallery = target.select("query"), target.select("gallery")
    if init is None:
        init = train_init(source, cfg)
    src_labels = np.array([init.label_map[int(v)] for v in source.identity], dtype=np.int64)

    enc = init_two_branch(init.encoder, cfg.encoder, init.head)
    art = RunArtifacts(config=cfg.to_dict(), encoder=enc)
    fp = evaluation.fingerprint(art.config)

    def report(diag=None) -> EvalReport:
        rep = evaluation.evaluate(query, gallery, enc, cfg.protocol)
        rep.diagnostics = dict(diag or {})
        rep.fingerprint = fp
        rep.seed = cfg.seed
        return rep

    art.reports.append(report())
    if cfg.mode == "source_only":
        return art

    guided = cfg.mode == "source_guided"
    opt = Adam(lr=cfg.uda_lr, weight_decay=cfg.weight_decay)
    src_sampler = PkSampler(src_labels, cfg.sampler, rng["uda_source"]) if guided else None
    xs, xt = source.features, target_train.features

    for t in range(1, cfg.n_iter + 1):
        feats = enc.embed_eval(xt, "target")
        pseudo = cluster_target(feats, cfg, rng["kmeans"])
        diag = evaluation.cluster_diagnostics(pseudo, target_train)
        if pseudo_label_hook is not None:
            pseudo = pseudo_label_hook(t, pseudo)
        art.pseudo_labels.append(pseudo)
        try:
            subset = assign_pseudo_labels(pseudo, len(target_train))
        except ClusterCollapse as exc:
            art.status = f"aborted at iteration {t}: {exc}"
            raise PipelineError(art.status, art) from exc
        art.cluster_counts.append(subset.num_clusters)
        diag["num_pseudo_labeled"] = int(len(subset.indices))
        diag["num_training_clusters"] = int(subset.num_clusters)

        old_head = enc.heads["target"]
        if old_head is not None:
            opt.reset(old_head.params())
        enc.reinit_target_head(subset.num_clusters, rng["target_head"], std=cfg.head_std)
        tgt_cfg = cfg.sampler
        if subset.num_clusters < tgt_cfg.P:
            tgt_cfg = dataclasses.replace(tgt_cfg, P=subset.num_clusters)
        tgt_sampler = PkSampler(subset.labels, tgt_cfg, rng["uda_target"])
        params = (enc.all_parameters() if guided else enc.trainable_parameters("target"))

        for epoch in range(cfg.n_epoch):
            for step in range(cfg.sampler.batches_per_epoch):
                for p in params:
                    p.zero_grad()
                tb = tgt_sampler.next_batch()
                rows_t = subset.indices[tb]
                if guided:
                    sb = src_sampler.next_batch()
                    out = joint_loss(enc, xs[sb], src_labels[sb], xt[rows_t], subset.labels[tb], cfg.triplet)
                    src_l, tgt_l = out["source"]["loss"], out["target"]["loss"]
                else:
                    out = domain_step(enc, xt[rows_t], subset.labels[tb], "target", cfg.triplet)
                    src_l, tgt_l = 0.0, out["loss"]
                if not np.isfinite(out["loss"]):
                    art.status = f"non-finite loss at iteration {t}"
                    raise PipelineError(art.status, art)
                opt.step(params)
                art.loss_curve.append((t, epoch, step, out["loss"], src_l, tgt_l))
                if batch_hook is not None:
                    batch_hook({"iteration": t, "epoch": epoch, "step": step, "loss": out["loss"],
                                "source_loss": src_l, "target_loss": tgt_l, "encoder": enc})
        art.reports.append(report(diag))
        log.info("iter %d: %d clusters, mAP %.4f", t, subset.num_clusters, art.reports[-1].mAP)
    return art


# --- sweeps ----------------------------------------------------------------

SWEEP_AXES = {"p": "dbscan.p", "k": "kmeans_k", "shared_depth": "encoder.shared_depth"}


def load_domains(cfg: PipelineConfig) -> SynthDomains:
    return generate(cfg.data)


def _cell(args):
    cfg, domains, init = args
    try:
        art = run(cfg, domains.source, domains.target, init=init)
        return {"mAP": art.final.mAP, "cmc": art.final.cmc, "status": art.status}
    except PipelineError as exc:
        return {"mAP": float("nan"), "cmc": {}, "status": str(exc)}


def sweep(cfg: PipelineConfig, axis: str, values, domains: SynthDomains | None = None,
          init: InitResult | None = None, threads: int | None = None) -> dict:
    """Run one cell per value; E0 is trained once and shared by every cell."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if axis == "p" and cfg.clusterer != "dbscan":
        raise ValueError("axis p requires the dbscan clusterer")
    if axis == "k" and cfg.clusterer != "kmeans":
        raise ValueError("axis k requires the kmeans clusterer")
    domains = domains or load_domains(cfg)
    cells = []
    for v in values:
        v = int(v) if axis in ("k", "shared_depth") else float(v)
        cells.append((v, cfg.replace(**{SWEEP_AXES[axis]: v})))
    if init is None:
        init = train_init(domains.source, cfg)
    threads = threads or int(os.environ.get("SGUDA_THREADS", "1"))
    jobs = [(c, domains, init) for _, c in cells]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    rows = []
    for (v, _), res in zip(cells, results):
        rows.append({"axis": axis, "value": v, "mAP": res["mAP"],
                     "cmc1": res["cmc"].get(1, float("nan")), "status": res["status"]})
    maps = np.array([r["mAP"] for r in rows])
    std = float(np.std(maps)) if np.all(np.isfinite(maps)) else float("nan")
    return {"axis": axis, "mode": cfg.mode, "rows": rows, "std": std}


def write_sweep_csv(table: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["axis", "value", "mode", "mAP", "cmc1", "std", "status"])
        for r in table["rows"]:
            w.writerow([r["axis"], repr(r["value"]), table["mode"], repr(r["mAP"]), repr(r["cmc1"]),
                        repr(table["std"]), r["status"]])
