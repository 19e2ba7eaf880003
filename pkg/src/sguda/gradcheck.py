"""Central finite-difference checks of every analytic gradient.

Relative error is ``||a - b|| / max(||a||, ||b||)`` over the checked entries.
Entries whose perturbation flips a ReLU mask, a triplet hinge, or a mining
choice are non-differentiable points and are skipped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .encoder import ClassifierHead, Encoder, EncoderConfig, init_two_branch
from .losses import TripletConfig, domain_loss, joint_loss, softmax_ce, triplet_batch_hard
from .nn import BatchNorm, Linear, ReLU
from .tensor import make_rng

H = 1e-5


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x: np.ndarray, h: float = H, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    idx = list(np.ndindex(x.shape)) if entries is None else entries
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float
    checked: int
    skipped: int = 0

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol and self.checked > 0


def check_linear(rng, tol=1e-6) -> list[CheckResult]:
    layer = Linear(5, 4, rng, name="lin")
    layer.bias.data[:] = rng.standard_normal(4)
    x = rng.standard_normal((6, 5))
    proj = rng.standard_normal((6, 4))
    f = lambda: float((layer.forward(x) * proj).sum())
    f()
    gx = layer.backward(proj)
    return [
        CheckResult("linear.x", rel_err(gx, numeric_grad(f, x)), tol, x.size),
        CheckResult("linear.weight", rel_err(layer.weight.grad, numeric_grad(f, layer.weight.data)), tol,
                    layer.weight.data.size),
        CheckResult("linear.bias", rel_err(layer.bias.grad, numeric_grad(f, layer.bias.data)), tol, 4),
    ]


def check_relu(rng, tol=1e-6) -> list[CheckResult]:
    relu = ReLU()
    x = rng.standard_normal((6, 5))
    x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
    proj = rng.standard_normal((6, 5))
    f = lambda: float((relu.forward(x) * proj).sum())
    f()
    g = relu.backward(proj)
    return [CheckResult("relu.x", rel_err(g, numeric_grad(f, x)), tol, x.size)]


def check_batchnorm(rng, tol=1e-5) -> list[CheckResult]:
    bn = BatchNorm(4, name="bn")
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
    bn.beta.data[:] = rng.standard_normal(4)
    x = rng.standard_normal((7, 4)) * 2 + 1
    proj = rng.standard_normal((7, 4))
    f = lambda: float((bn.forward(x, "source", "train") * proj).sum())
    f()
    gx, gg, gb = bn.batchnorm_backward(proj)
    return [
        CheckResult("batchnorm.x", rel_err(gx, numeric_grad(f, x)), tol, x.size),
        CheckResult("batchnorm.gamma", rel_err(gg, numeric_grad(f, bn.gamma.data)), tol, 4),
        CheckResult("batchnorm.beta", rel_err(gb, numeric_grad(f, bn.beta.data)), tol, 4),
    ]


def _triplet_state(e, y, cfg):
    r = triplet_batch_hard(e, y, cfg)
    return r, (tuple(r.positives), tuple(r.negatives), tuple(r.active))


def check_triplet(rng, tol=1e-5) -> list[CheckResult]:
    cfg = TripletConfig(margin=0.3)
    y = np.repeat(np.arange(3), 3)
    e = rng.standard_normal((9, 4))
    res, state = _triplet_state(e, y, cfg)
    entries, skipped = [], 0
    for i in np.ndindex(e.shape):
        ok = True
        for s in (H, -H):
            e2 = e.copy()
            e2[i] += s
            if _triplet_state(e2, y, cfg)[1] != state:
                ok = False
        if ok:
            entries.append(i)
        else:
            skipped += 1
    f = lambda: triplet_batch_hard(e, y, cfg).loss
    num = numeric_grad(f, e, entries=entries)
    ana = np.array([res.grad[i] for i in entries])
    return [CheckResult("triplet.embeddings", rel_err(ana, num), tol, len(entries), skipped)]


def check_softmax_ce(rng, tol=1e-6) -> list[CheckResult]:
    e = rng.standard_normal((6, 4))
    w = rng.standard_normal((4, 5))
    y = rng.integers(0, 5, 6)
    res = softmax_ce(e, y, w)
    f = lambda: softmax_ce(e, y, w).loss
    return [
        CheckResult("softmax_ce.embeddings", rel_err(res.grad_embeddings, numeric_grad(f, e)), tol, e.size),
        CheckResult("softmax_ce.weight", rel_err(res.grad_weight, numeric_grad(f, w)), tol, w.size),
    ]


def _small_two_branch(rng, shared_depth=1, domain_specific_bn=True):
    cfg = EncoderConfig(input_dim=6, block_dims=(8, 8), embed_dim=5, shared_depth=shared_depth,
                        domain_specific_bn=domain_specific_bn)
    base = Encoder(cfg, rng)
    head = ClassifierHead(cfg.embed_dim, 3, rng, std=0.5)
    enc = init_two_branch(base, cfg, head)
    enc.reinit_target_head(3, rng, std=0.5)
    # break the copy symmetry so the two paths differ
    for p in enc.all_parameters():
        p.data += 0.05 * rng.standard_normal(p.data.shape)
    return enc


def _joint_value(enc, xs, ys, xt, yt, cfg):
    """Loss value plus the discrete state (ReLU masks, mining) it depends on."""
    if enc.cfg.domain_specific_bn:
        es, et = enc.forward(xs, "source", "train"), enc.forward(xt, "target", "train")
    else:
        es, et = enc.forward_joint(xs, xt, "train")
    total, state = 0.0, []
    for emb, y, d in ((es, ys, "source"), (et, yt, "target")):
        loss, *_ = domain_loss(emb, y, enc.heads[d].weight.data, cfg)
        total += loss
        tri = triplet_batch_hard(emb, y, cfg)
        state.append((tuple(tri.positives), tuple(tri.negatives), tuple(tri.active)))
        for layer in enc.path(d):
            relu = getattr(layer, "relu", None)
            if relu is not None:
                state.append(relu._mask.tobytes())
    return total, state


def check_joint(rng, tol=1e-5, per_param: int = 6, shared_depth: int = 1,
                domain_specific_bn: bool = True) -> list[CheckResult]:
    """Gradient of L = L^S + L^T w.r.t. every parameter array (sampled entries)."""
    cfg = TripletConfig(margin=0.3)
    enc = _small_two_branch(rng, shared_depth, domain_specific_bn)
    ys = np.repeat(np.arange(3), 3)
    yt = np.repeat(np.arange(3), 3)
    xs = rng.standard_normal((9, 6))
    xt = rng.standard_normal((9, 6)) + 0.5
    params = enc.all_parameters()
    for p in params:
        p.zero_grad()
    joint_loss(enc, xs, ys, xt, yt, cfg)
    _, state = _joint_value(enc, xs, ys, xt, yt, cfg)
    ana, num_all, skipped = [], [], 0
    f = lambda: _joint_value(enc, xs, ys, xt, yt, cfg)[0]
    for p in params:
        flat = list(np.ndindex(p.data.shape))
        pick = rng.choice(len(flat), size=min(per_param, len(flat)), replace=False)
        entries = []
        for k in pick:
            i = flat[k]
            old = p.data[i]
            stable = True
            for s in (H, -H):
                p.data[i] = old + s
                if _joint_value(enc, xs, ys, xt, yt, cfg)[1] != state:
                    stable = False
            p.data[i] = old
            if stable:
                entries.append(i)
            else:
                skipped += 1
        num_all.extend(numeric_grad(f, p.data, entries=entries))
        ana.extend(p.grad[i] for i in entries)
    bn = "" if domain_specific_bn else ",shared_bn"
    return [CheckResult(f"joint.all_params(s={shared_depth}{bn})", rel_err(np.array(ana), np.array(num_all)),
                        tol, len(ana), skipped)]


def run_all(seeds=(0, 1, 2)) -> list[CheckResult]:
    out = []
    for seed in seeds:
        for fn in (check_linear, check_relu, check_batchnorm, check_triplet, check_softmax_ce):
            for r in fn(make_rng(seed)):
                r.name = f"{r.name}[seed={seed}]"
                out.append(r)
        for s, dsbn in ((0, True), (1, True), (2, True), (1, False)):
            for r in check_joint(make_rng(seed), shared_depth=s, domain_specific_bn=dsbn):
                r.name = f"{r.name}[seed={seed}]"
                out.append(r)
    return out


def main(seed: int = 0, stream=None) -> bool:
    import sys
    stream = stream or sys.stdout
    t0 = time.time()
    results = run_all(seeds=(seed, seed + 1, seed + 2))
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name}: rel_err={r.rel_err:.2e} (tol {r.tol:.0e}, {r.checked} checked, "
              f"{r.skipped} skipped)", file=stream)
    print(f"gradcheck finished in {time.time() - t0:.1f}s", file=stream)
    return all(r.ok for r in results)
