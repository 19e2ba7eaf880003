"""Single- and two-branch MLP encoders, classifier heads, and checkpoints.

A block is ``Linear -> BatchNorm -> ReLU``; the embedding layer is a plain
``Linear``. The two-branch encoder shares its first ``shared_depth`` blocks
between domains and keeps separate copies of the remaining blocks and the
embedding layer for the source and target paths.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .nn import DOMAINS, SHARED, BatchNorm, Linear, Param, ReLU
from .tensor import DTYPE, ShapeError, as_matrix, l2_normalize


@dataclass
class EncoderConfig:
    input_dim: int = 32
    block_dims: tuple[int, ...] = (64, 64, 64, 64)
    embed_dim: int = 32
    shared_depth: int = 3
    domain_specific_bn: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.block_dims = tuple(int(d) for d in self.block_dims)
        if not 0 <= self.shared_depth <= self.num_blocks:
            raise ValueError(f"shared_depth must lie in [0, {self.num_blocks}], got {self.shared_depth}")

    @property
    def num_blocks(self) -> int:
        return len(self.block_dims)

    def bn_domains(self) -> tuple[str, ...]:
        return DOMAINS if self.domain_specific_bn else (SHARED,)


class Block:
    def __init__(self, in_dim: int, out_dim: int, rng, cfg: EncoderConfig, name: str):
        self.name = name
        self.linear = Linear(in_dim, out_dim, rng, name=f"{name}.linear")
        self.bn = BatchNorm(out_dim, domains=cfg.bn_domains(), momentum=cfg.bn_momentum,
                            eps=cfg.bn_eps, name=f"{name}.bn")
        self.relu = ReLU(name=f"{name}.relu")

    def layers(self):
        return (self.linear, self.bn, self.relu)

    def params(self) -> list[Param]:
        return self.linear.params() + self.bn.params()

    def forward(self, x, domain, mode):
        for layer in self.layers():
            x = layer.forward(x, domain, mode)
        return x

    def backward(self, g):
        for layer in reversed(self.layers()):
            g = layer.backward(g)
        return g


class ClassifierHead:
    """Bias-free linear classifier, ``logits = e @ W`` with W of shape (embed_dim, M)."""

    def __init__(self, embed_dim: int, num_classes: int, rng, std: float = 0.001, name: str = "head"):
        if num_classes < 2:
            raise ValueError(f"classifier head needs at least 2 classes, got {num_classes}")
        self.weight = Param(f"{name}.weight", rng.standard_normal((embed_dim, num_classes)) * std)

    @property
    def num_classes(self) -> int:
        return self.weight.data.shape[1]

    def params(self) -> list[Param]:
        return [self.weight]


def _run(layers, x, domain, mode):
    for layer in layers:
        x = layer.forward(x, domain, mode)
    return x


def _back(layers, g):
    for layer in reversed(layers):
        g = layer.backward(g)
    return g


class Encoder:
    """The single-path encoder E0 trained on source data."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        dims = (cfg.input_dim,) + cfg.block_dims
        self.blocks = [Block(dims[i], dims[i + 1], rng, cfg, f"block{i}") for i in range(cfg.num_blocks)]
        self.embed = Linear(dims[-1], cfg.embed_dim, rng, name="embed")

    def layers(self):
        return self.blocks + [self.embed]

    def params(self) -> list[Param]:
        return [p for layer in self.layers() for p in layer.params()]

    def forward(self, x, domain="source", mode="train"):
        x = as_matrix(x)
        if x.shape[1] != self.cfg.input_dim:
            raise ShapeError(f"encoder expects {self.cfg.input_dim} input columns, got {x.shape}")
        out = _run(self.layers(), x, domain, mode)
        return l2_normalize(out) if mode == "eval" else out

    def backward(self, g):
        return _back(self.layers(), g)

    def embed_eval(self, x, domain="source"):
        return self.forward(x, domain, "eval")


class TwoBranchEncoder:
    """Shared trunk E^C followed by source/target branches E^S and E^T.

    With ``shared_depth == num_blocks`` both branches are the same list of
    layer objects (a fully shared model).
    """

    def __init__(self, cfg: EncoderConfig, shared, source_branch, target_branch,
                 head_source: ClassifierHead | None = None, head_target: ClassifierHead | None = None):
        self.cfg = cfg
        self.shared = shared
        self.branches = {"source": source_branch, "target": target_branch}
        self.heads: dict[str, ClassifierHead | None] = {"source": head_source, "target": head_target}

    @property
    def aliased(self) -> bool:
        return self.branches["source"] is self.branches["target"]

    def path(self, domain: str):
        if domain not in DOMAINS:
            raise KeyError(f"unknown domain {domain!r}")
        return self.shared + self.branches[domain]

    def forward(self, x, domain: str, mode: str = "train"):
        x = as_matrix(x)
        if x.shape[1] != self.cfg.input_dim:
            raise ShapeError(f"encoder expects {self.cfg.input_dim} input columns, got {x.shape}")
        out = _run(self.path(domain), x, domain, mode)
        return l2_normalize(out) if mode == "eval" else out

    def backward(self, g, domain: str):
        return _back(self.path(domain), g)

    def embed_eval(self, x, domain="target"):
        return self.forward(x, domain, "eval")

    # joint forward used when batch-norm statistics are shared across domains:
    # the trunk sees the concatenated batch so BN normalizes with mixed statistics
    def _joint_split(self):
        if self.aliased:
            return self.shared + self.branches["source"], [], []
        return self.shared, self.branches["source"], self.branches["target"]

    def forward_joint(self, xs, xt, mode: str = "train"):
        trunk, bs, bt = self._joint_split()
        h = _run(trunk, np.vstack([as_matrix(xs), as_matrix(xt)]), SHARED, mode)
        ns = len(xs)
        return _run(bs, h[:ns], "source", mode), _run(bt, h[ns:], "target", mode)

    def backward_joint(self, gs, gt):
        trunk, bs, bt = self._joint_split()
        g = np.vstack([_back(bs, gs), _back(bt, gt)])
        return _back(trunk, g)

    def shared_params(self) -> list[Param]:
        return [p for layer in self.shared for p in layer.params()]

    def branch_params(self, domain: str) -> list[Param]:
        return [p for layer in self.branches[domain] for p in layer.params()]

    def trainable_parameters(self, domain: str, include_head: bool = True) -> list[Param]:
        params = self.shared_params() + self.branch_params(domain)
        head = self.heads[domain]
        if include_head and head is not None:
            params += head.params()
        return params

    def all_parameters(self) -> list[Param]:
        """Every distinct parameter, each exactly once, in declaration order."""
        seen, out = set(), []
        for domain in DOMAINS:
            for p in self.trainable_parameters(domain):
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def unique_layers(self):
        seen, out = set(), []
        for domain in DOMAINS:
            for layer in self.path(domain):
                if id(layer) not in seen:
                    seen.add(id(layer))
                    out.append(layer)
        return out

    def bn_layers(self) -> list[BatchNorm]:
        return [layer.bn for layer in self.unique_layers() if isinstance(layer, Block)]

    def reinit_target_head(self, num_clusters: int, rng, std: float = 0.001) -> ClassifierHead:
        head = ClassifierHead(self.cfg.embed_dim, num_clusters, rng, std=std, name="head_target")
        self.heads["target"] = head
        return head


def init_two_branch(trained: Encoder, cfg: EncoderConfig | None = None,
                    head_source: ClassifierHead | None = None) -> TwoBranchEncoder:
    """Build E^C, E^S, E^T so that both composed paths equal ``trained``."""
    cfg = cfg or trained.cfg
    tcfg = trained.cfg
    if (tcfg.input_dim, tcfg.block_dims, tcfg.embed_dim) != (cfg.input_dim, cfg.block_dims, cfg.embed_dim):
        raise ShapeError(
            f"trained encoder shape ({tcfg.input_dim}, {tcfg.block_dims}, {tcfg.embed_dim}) "
            f"does not match config ({cfg.input_dim}, {cfg.block_dims}, {cfg.embed_dim})")
    if tcfg.domain_specific_bn != cfg.domain_specific_bn:
        raise ShapeError("trained encoder and config disagree on domain_specific_bn")
    blocks = copy.deepcopy(trained.blocks)
    embed = copy.deepcopy(trained.embed)
    s = cfg.shared_depth
    shared = blocks[:s]
    source_branch = blocks[s:] + [embed]
    if s == cfg.num_blocks:
        target_branch = source_branch
    else:
        target_branch = copy.deepcopy(source_branch)
    enc = TwoBranchEncoder(cfg, shared, source_branch, target_branch,
                           head_source=copy.deepcopy(head_source))
    if cfg.domain_specific_bn:
        for bn in enc.bn_layers():
            bn.stats["target"] = bn.stats["source"].copy()
    return enc


# --- checkpoints -----------------------------------------------------------
#
# Layout (all integers little-endian):
#   b"SGUDACK1"                      8-byte magic
#   uint64 header_len
#   header_len bytes of UTF-8 JSON   {"kind", "config", "arrays": [[name, shape], ...]}
#   float64 little-endian payload    arrays in header order, row-major

_MAGIC = b"SGUDACK1"


def _state_arrays(model) -> list[tuple[str, np.ndarray]]:
    arrays = []
    if isinstance(model, Encoder):
        layers = model.layers()
        heads = []
    else:
        layers = model.unique_layers()
        heads = [(d, h) for d, h in model.heads.items() if h is not None]
    for layer in layers:
        for p in layer.params():
            arrays.append((p.name if not isinstance(model, TwoBranchEncoder) else _qual(model, layer, p), p.data))
        if isinstance(layer, Block):
            for slot, st in layer.bn.stats.items():
                arrays.append((f"{_qual(model, layer)}.bn.running_mean.{slot}", st.mean))
                arrays.append((f"{_qual(model, layer)}.bn.running_var.{slot}", st.var))
    for d, h in heads:
        arrays.append((f"head_{d}.weight", h.weight.data))
    return arrays


def _qual(model, layer, p: Param | None = None) -> str:
    prefix = ""
    if isinstance(model, TwoBranchEncoder):
        if any(layer is x for x in model.shared):
            prefix = "shared."
        elif any(layer is x for x in model.branches["source"]):
            prefix = "shared_branch." if model.aliased else "source."
        else:
            prefix = "target."
    base = layer.name
    return prefix + (base if p is None else p.name)


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    arrays = _state_arrays(model)
    header = {
        "kind": "two_branch" if isinstance(model, TwoBranchEncoder) else "single",
        "config": asdict(model.cfg),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    if isinstance(model, TwoBranchEncoder):
        header["heads"] = {d: (h.num_classes if h is not None else None) for d, h in model.heads.items()}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path}: not an encoder checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    cfg = EncoderConfig(**header["config"])
    dummy = np.random.Generator(np.random.PCG64(0))
    base = Encoder(cfg, dummy)
    if header["kind"] == "single":
        model = base
    else:
        model = init_two_branch(base, cfg)
        for d, m in header["heads"].items():
            if m is not None:
                model.heads[d] = ClassifierHead(cfg.embed_dim, m, dummy, name=f"head_{d}")
    arrays = _state_arrays(model)
    names = [name for name, _ in arrays]
    if names != [name for name, _ in header["arrays"]]:
        raise ValueError(f"{path}: checkpoint layout does not match its config")
    offset = 0
    for (_, target), (_, shape) in zip(arrays, header["arrays"]):
        size = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).astype(DTYPE).reshape(shape)
        target[...] = vals
        offset += size * 8
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes in checkpoint payload")
    return model, header.get("extra")
