"""Cross-camera retrieval metrics (mAP, CMC) and pseudo-label diagnostics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .cluster import OUTLIER, PseudoLabelSet
from .tensor import pairwise_sqeuclidean


class ProtocolError(ValueError):
    """A query has no valid gallery match under the evaluation protocol."""


@dataclass
class EvalProtocol:
    exclude_same_camera_same_id: bool = True
    cmc_ranks: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        self.cmc_ranks = tuple(int(r) for r in self.cmc_ranks)
        if list(self.cmc_ranks) != sorted(self.cmc_ranks) or min(self.cmc_ranks) < 1:
            raise ValueError("cmc_ranks must be positive and sorted ascending")


@dataclass
class EvalReport:
    mAP: float
    cmc: dict
    num_queries: int
    diagnostics: dict = field(default_factory=dict)
    fingerprint: str = ""
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "num_queries": self.num_queries,
            "diagnostics": self.diagnostics,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def csv_header(self) -> list[str]:
        return (["mAP"] + [f"cmc@{r}" for r in self.cmc] + ["num_queries"]
                + sorted(self.diagnostics) + ["fingerprint", "seed"])

    def csv_row(self) -> list:
        return ([repr(self.mAP)] + [repr(v) for v in self.cmc.values()] + [self.num_queries]
                + [self.diagnostics[k] for k in sorted(self.diagnostics)] + [self.fingerprint, self.seed])

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


def rank_ties(distances) -> np.ndarray:
    """Gallery order for one query: ascending distance, ties by gallery index."""
    return np.argsort(np.asarray(distances), kind="stable")


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@k over the positions k holding a relevant item."""
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        raise ProtocolError("no relevant items")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def evaluate_distances(dist, q_ids, g_ids, q_cams, g_cams,
                       protocol: EvalProtocol | None = None) -> EvalReport:
    protocol = protocol or EvalProtocol()
    dist = np.asarray(dist)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    aps = []
    first_hit = []
    for qi in range(len(q_ids)):
        order = rank_ties(dist[qi])
        same_id = g_ids[order] == q_ids[qi]
        if protocol.exclude_same_camera_same_id:
            keep = ~(same_id & (g_cams[order] == q_cams[qi]))
            same_id = same_id[keep]
        if not same_id.any():
            raise ProtocolError(f"query {qi} (identity {q_ids[qi]}) has no valid gallery match")
        aps.append(average_precision(same_id))
        first_hit.append(int(np.argmax(same_id)))
    first_hit = np.array(first_hit)
    cmc = {r: float(np.mean(first_hit < r)) for r in protocol.cmc_ranks}
    return EvalReport(float(np.mean(aps)), cmc, len(q_ids))


def embed(encoder, dataset, domain: str = "target") -> np.ndarray:
    return encoder.embed_eval(dataset.features, domain)


def evaluate(query, gallery, encoder, protocol: EvalProtocol | None = None,
             domain: str = "target") -> EvalReport:
    """Rank the gallery for every query by squared distance of normalised embeddings."""
    q = embed(encoder, query, domain)
    g = embed(encoder, gallery, domain)
    return evaluate_distances(pairwise_sqeuclidean(q, g), query.identity, gallery.identity,
                              query.camera, gallery.camera, protocol)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pseudo, truth) -> float:
    """Normalised mutual information with arithmetic-mean normalisation.

    Rows marked OUTLIER in ``pseudo`` are dropped from both sides.
    """
    a = np.asarray(pseudo.labels if isinstance(pseudo, PseudoLabelSet) else pseudo)
    b = np.asarray(truth)
    if len(a) != len(b):
        raise ValueError("pseudo-labels and truth differ in length")
    keep = a != OUTLIER
    a, b = a[keep], b[keep]
    if len(a) == 0:
        raise ValueError("no overlap between pseudo-labels and truth after removing outliers")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    joint = _entropy(table.ravel())
    mi = max(ha + hb - joint, 0.0)
    return float(min(mi / (0.5 * (ha + hb)), 1.0))


def cluster_diagnostics(pseudo: PseudoLabelSet, dataset) -> dict:
    """Pseudo-label quality against the hidden target-train identities."""
    out = {
        "num_clusters": int(pseudo.num_clusters),
        "outlier_fraction": float(np.mean(pseudo.labels == OUTLIER)),
    }
    if dataset.has_hidden and (pseudo.labels != OUTLIER).any():
        out["nmi"] = nmi(pseudo, dataset.hidden_identities())
    return out


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
