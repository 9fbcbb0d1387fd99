"""Finite-difference gradient suites, one per component, used by the CLI and the tests.

Each suite runs at float64 and returns ``(label, GradcheckResult)`` pairs.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, get_default_dtype, gradcheck, make_rng, ops, set_default_dtype
from .autograd.gradcheck import GradcheckResult
from .grid import TokenGrid

Check = tuple[str, GradcheckResult]


def leaf(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def projected(out_fn, *inputs, rng):
    """Scalar loss: the op output contracted with a fixed random probe."""
    r = rng.standard_normal(out_fn(*inputs).shape)
    return lambda: ops.sum(ops.mul(out_fn(*inputs), r))


# -- per-op cases: each builds (fn, inputs) with fresh random shapes ---------------

def _case_add(r):
    s = _shape(r, 3)
    return ops.add, [leaf(r.standard_normal(s)), leaf(r.standard_normal((1,) + s[1:]))]


def _case_sub(r):
    s = _shape(r, 2)
    return ops.sub, [leaf(r.standard_normal(s)), leaf(r.standard_normal(s))]


def _case_mul(r):
    s = _shape(r, 2)
    return ops.mul, [leaf(r.standard_normal(s)), leaf(r.standard_normal(s[-1:]))]


def _case_div(r):
    s = _shape(r, 2)
    return ops.div, [leaf(r.standard_normal(s)), leaf(r.uniform(0.5, 2.0, s))]


def _case_matmul(r):
    b, m, k, n = _shape(r, 4)
    return ops.matmul, [leaf(r.standard_normal((b, m, k))), leaf(r.standard_normal((k, n)))]


def _case_softmax(r):
    return (lambda x: ops.softmax(x, -1)), [leaf(r.standard_normal(_shape(r, 3)))]


def _case_log_softmax(r):
    return (lambda x: ops.log_softmax(x, -1)), [leaf(r.standard_normal(_shape(r, 2)))]


def _case_layer_norm(r):
    s = _shape(r, 2) + (int(r.integers(2, 6)),)
    d = s[-1]
    return ops.layer_norm, [leaf(r.standard_normal(s)), leaf(r.standard_normal(d)), leaf(r.standard_normal(d))]


def _case_relu(r):
    x = r.standard_normal(_shape(r, 2))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    return ops.relu, [leaf(x)]


def _case_gelu(r):
    return ops.gelu, [leaf(r.standard_normal(_shape(r, 2)) * 2)]


def _case_sigmoid(r):
    return ops.sigmoid, [leaf(r.standard_normal(_shape(r, 2)) * 3)]


def _case_exp(r):
    return ops.exp, [leaf(r.standard_normal(_shape(r, 2)))]


def _case_sqrt(r):
    return ops.sqrt, [leaf(r.uniform(0.3, 3.0, _shape(r, 2)))]


def _case_clip(r):
    x = r.uniform(-2, 2, _shape(r, 2))
    x = np.where(np.abs(np.abs(x) - 1) < 1e-2, 0.0, x)
    return (lambda t: ops.clip(t, -1.0, 1.0)), [leaf(x)]


def _case_conv2d(r):
    b, c, o = _shape(r, 3, 1, 3)
    k = int(r.choice([1, 2, 3]))
    stride = int(r.choice([1, 2]))
    pad = int(r.integers(0, 2))
    h, w = _shape(r, 2, k + 1, 6)
    fn = lambda x, wt, bias: ops.conv2d(x, wt, bias, stride=stride, padding=pad)
    return fn, [leaf(r.standard_normal((b, h, w, c))), leaf(r.standard_normal((k, k, c, o))), leaf(r.standard_normal(o))]


def _case_depthwise(r):
    b, c = _shape(r, 2, 1, 3)
    k = int(r.choice([3, 5]))
    h, w = _shape(r, 2, 3, 6)
    fn = lambda x, wt: ops.depthwise_conv2d(x, wt, padding=k // 2)
    return fn, [leaf(r.standard_normal((b, h, w, c))), leaf(r.standard_normal((k, k, c)))]


def _case_pad_edge(r):
    p = int(r.integers(1, 3))
    return (lambda t: ops.pad_edge(t, p)), [leaf(r.standard_normal(_shape(r, 4, 1, 3)))]


def _case_maxpool(r):
    b, h, w, c = _shape(r, 4, 1, 3)
    # distinct values so no ties sit within eps of each other
    x = r.permutation(b * 2 * h * 2 * w * c).reshape(b, 2 * h, 2 * w, c) * 0.1
    return (lambda t: ops.maxpool2d(t, 2)), [leaf(x)]


def _case_upsample_nearest(r):
    f = int(r.integers(1, 4))
    return (lambda t: ops.upsample_nearest(t, f)), [leaf(r.standard_normal(_shape(r, 4, 1, 3)))]


def _case_upsample_bilinear(r):
    f = int(r.choice([2, 4]))
    return (lambda t: ops.upsample_bilinear(t, f)), [leaf(r.standard_normal(_shape(r, 4, 1, 3)))]


def _case_concat(r):
    s = _shape(r, 3)
    ax = int(r.integers(0, 3))
    s2 = list(s)
    s2[ax] = int(r.integers(1, 4))
    return (lambda a, b: ops.concat([a, b], axis=ax)), [leaf(r.standard_normal(s)), leaf(r.standard_normal(s2))]


def _case_sum(r):
    s = _shape(r, 3)
    ax = int(r.integers(0, 3))
    return (lambda t: ops.sum(t, axis=ax, keepdims=True)), [leaf(r.standard_normal(s))]


def _case_mean(r):
    s = _shape(r, 3)
    ax = int(r.integers(0, 3))
    return (lambda t: ops.mean(t, axis=ax)), [leaf(r.standard_normal(s))]


def _case_linear(r):
    n, i, o = _shape(r, 3)
    return ops.linear, [leaf(r.standard_normal((2, n, i))), leaf(r.standard_normal((i, o))), leaf(r.standard_normal(o))]


def _case_log(r):
    return ops.log, [leaf(r.uniform(0.2, 3.0, _shape(r, 2)))]


def _case_roll(r):
    s = _shape(r, 3, 2, 4)
    sh = (int(r.integers(-2, 3)), int(r.integers(-2, 3)))
    return (lambda t: ops.roll(t, sh, (0, 1))), [leaf(r.standard_normal(s))]


def _case_reshape_transpose(r):
    a, b, c = _shape(r, 3)
    return (lambda t: ops.transpose(ops.reshape(t, (a * b, c)), (1, 0))), [leaf(r.standard_normal((a, b, c)))]


def _case_getitem(r):
    s = _shape(r, 2, 2, 5)
    idx = r.integers(0, s[0], size=4)
    return (lambda t: ops.getitem(t, idx)), [leaf(r.standard_normal(s))]


def _case_broadcast_to(r):
    s = _shape(r, 2)
    return (lambda t: ops.broadcast_to(t, (3,) + s)), [leaf(r.standard_normal((1, s[1])))]


OP_CASES: dict[str, Callable] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "sigmoid": _case_sigmoid,
    "exp": _case_exp,
    "sqrt": _case_sqrt,
    "clip": _case_clip,
    "conv2d": _case_conv2d,
    "depthwise_conv2d": _case_depthwise,
    "pad_edge": _case_pad_edge,
    "maxpool2d": _case_maxpool,
    "upsample_nearest": _case_upsample_nearest,
    "upsample_bilinear": _case_upsample_bilinear,
    "concat": _case_concat,
    "sum": _case_sum,
    "mean": _case_mean,
    "linear": _case_linear,
    "log": _case_log,
    "roll": _case_roll,
    "reshape_transpose": _case_reshape_transpose,
    "getitem": _case_getitem,
    "broadcast_to": _case_broadcast_to,
}


def _perturb(module, r, scale=0.1):
    # move LayerNorm affines and zero-initialised tensors off their special values
    for p in module.parameters():
        p.data = p.data + scale * r.standard_normal(p.shape)


def check_tensor(eps: float, tol: float, trials: int = 3) -> list[Check]:
    out = []
    for i, (name, build) in enumerate(OP_CASES.items()):
        for t in range(trials):
            r = np.random.default_rng(7919 * t + i)
            fn, inputs = build(r)
            out.append((f"op:{name}#{t}", gradcheck(projected(fn, *inputs, rng=r), inputs, eps=eps, tol=tol)))
    return out


def check_edge(eps: float, tol: float) -> list[Check]:
    from .edge import PdcBlock, VARIANTS

    out = []
    r = np.random.default_rng(11)
    for variant in VARIANTS:
        blk = PdcBlock(make_rng(1), 3, variant)
        x = leaf(r.standard_normal((1, 5, 5, 3)))
        probe = r.standard_normal((1, 5, 5, 3))
        res = gradcheck(lambda: ops.sum(ops.mul(blk(x), probe)), blk.parameters() + [x], eps=eps, tol=tol)
        out.append((f"pdc:{variant}", res))
    return out


def check_body(eps: float, tol: float) -> list[Check]:
    from .body import PatchMerging, swin_block_pair

    r = np.random.default_rng(12)
    blocks = swin_block_pair(make_rng(2), 4, (4, 4), 2, 2)
    merge = PatchMerging(make_rng(3), 4)
    for m in blocks + [merge]:
        _perturb(m, r)
    x = leaf(r.standard_normal((1, 16, 4)))
    probe = r.standard_normal((1, 4, 8))

    def loss():
        z = TokenGrid(x, (4, 4))
        for b in blocks:
            z = b(z)
        return ops.sum(ops.mul(merge(z).tokens, probe))

    params = [p for m in blocks + [merge] for p in m.parameters()] + [x]
    return [("swin-pair+merge", gradcheck(loss, params, eps=eps, tol=tol))]


def check_lcaf(eps: float, tol: float) -> list[Check]:
    from .lcaf import LCAF

    r = np.random.default_rng(13)
    out = []
    for residual in ("body", "edge", "sum"):
        m = LCAF(make_rng(4), 4, (2, 4), (2, 2), 2, residual=residual)
        e, b = leaf(r.standard_normal((1, 8, 4))), leaf(r.standard_normal((1, 8, 4)))
        probe = r.standard_normal((1, 8, 4))
        fn = lambda: ops.sum(ops.mul(m(TokenGrid(e, (2, 4)), TokenGrid(b, (2, 4))).tokens, probe))
        out.append((f"lcaf:{residual}", gradcheck(fn, m.parameters() + [e, b], eps=eps, tol=tol)))
    return out


def check_dlf(eps: float, tol: float) -> list[Check]:
    from .dlf import DLF

    r = np.random.default_rng(14)
    out = []
    for inject in ("add", "concat-project"):
        d = DLF(make_rng(5), 4, 8, 4, 1, heads_s=2, heads_l=2, inject=inject)
        _perturb(d, r)
        ps, pl = leaf(r.standard_normal((1, 4, 4))), leaf(r.standard_normal((1, 1, 8)))
        rs, rl = r.standard_normal((1, 4, 4)), r.standard_normal((1, 1, 8))

        def fn():
            zs, zl = d(TokenGrid(ps, (2, 2)), TokenGrid(pl, (1, 1)))
            return ops.add(ops.sum(ops.mul(zs.tokens, rs)), ops.sum(ops.mul(zl.tokens, rl)))

        out.append((f"dlf:{inject}", gradcheck(fn, d.parameters() + [ps, pl], eps=eps, tol=tol)))
    return out


def check_losses(eps: float, tol: float) -> list[Check]:
    from .losses import LossWeights, bce_loss, dice_loss, edge_loss, total_loss
    from .model import ModelOutput

    r = np.random.default_rng(15)
    p = leaf(r.uniform(0.05, 0.95, (1, 3, 3, 1)))
    t_edge = r.choice([0.0, 0.1, 1.0], size=(1, 3, 3, 1))
    t_bin = r.integers(0, 2, size=(1, 3, 3, 1)).astype(float)
    logits = leaf(r.standard_normal((1, 2, 3, 3)))
    side = leaf(r.uniform(0.05, 0.95, (1, 2, 3, 1)))
    mask = r.integers(0, 3, size=(1, 2, 3))
    edges = r.integers(0, 2, size=(1, 2, 3)).astype(float)
    return [
        ("edge_loss", gradcheck(lambda: edge_loss([p], t_edge), [p], eps=eps, tol=tol)),
        ("bce_loss", gradcheck(lambda: bce_loss(p, t_bin), [p], eps=eps, tol=tol)),
        ("dice_loss", gradcheck(lambda: dice_loss(p, t_bin), [p], eps=eps, tol=tol)),
        ("total_loss", gradcheck(
            lambda: total_loss(ModelOutput(logits, [side]), mask, edges, LossWeights()).total,
            [logits, side], eps=eps, tol=tol)),
    ]


def tiny_model_config(**overrides):
    from .model import ModelConfig

    base = dict(image_size=(32, 32), base_dim=4, window=2, lca_window=(2, 2), depths=(1, 1, 1, 1),
                heads=(1, 1, 2, 2), num_classes=2, edge_blocks=1, mlp_ratio=2)
    base.update(overrides)
    return ModelConfig(**base)


def check_model(eps: float, tol: float, per_input: int = 6) -> list[Check]:
    """End-to-end: the full tiny model and its total loss, sampled entries of every parameter."""
    from .data import generate_synthetic
    from .losses import LossWeights, total_loss
    from .model import BEFUnet

    cfg = tiny_model_config()
    model = BEFUnet(cfg, make_rng(6))
    _perturb(model, np.random.default_rng(16), 0.05)
    s = generate_synthetic(1, 32, 32, 2, seed=3)[0]
    img = Tensor(s.image[None])
    mask, edges = s.mask[None], s.edge[None].astype(float)
    weights = LossWeights.from_config(cfg)

    def fn():
        return total_loss(model(img), mask, edges, weights).total

    names, params = zip(*model.named_parameters())
    res = gradcheck(fn, list(params), list(names), eps=eps, tol=tol, max_per_input=per_input,
                    rng=np.random.default_rng(0))
    return [("model:tiny-32x32", res)]


SUITES: dict[str, Callable[[float, float], list[Check]]] = {
    "tensor": check_tensor,
    "edge": check_edge,
    "body": check_body,
    "lcaf": check_lcaf,
    "dlf": check_dlf,
    "losses": check_losses,
    "model": check_model,
}


def run_suites(names, eps: float = 1e-5, tol: float = 1e-4) -> list[Check]:
    """Run the named suites at float64, restoring the caller's default dtype afterwards."""
    saved = get_default_dtype()
    set_default_dtype(np.float64)
    try:
        results = []
        for name in names:
            results.extend(SUITES[name](eps, tol))
        return results
    finally:
        set_default_dtype(saved)
