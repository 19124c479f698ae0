"""Finite-difference case builders shared by the gradient tests and the acceptance gate.

Each builder takes a Generator and returns ``(fn, inputs)`` where ``fn()``
builds a Tensor from the leaf ``inputs``.
"""

import numpy as np

from hiq.autodiff import Tensor, ops


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _sample_shape(rng, ndim, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _case_add(rng):
    s = _sample_shape(rng, 2)
    a, b = leaf(rng, *s), leaf(rng, 1, s[1])
    return (lambda: a + b), [a, b]


def _case_sub(rng):
    s = _sample_shape(rng, 2)
    a, b = leaf(rng, *s), leaf(rng, *s)
    return (lambda: a - b), [a, b]


def _case_mul(rng):
    s = _sample_shape(rng, 3)
    a, b = leaf(rng, *s), leaf(rng, s[-1])
    return (lambda: a * b), [a, b]


def _case_div(rng):
    s = _sample_shape(rng, 2)
    a = leaf(rng, *s)
    b = Tensor(rng.uniform(0.5, 2.0, size=s) * rng.choice([-1, 1], size=s), requires_grad=True)
    return (lambda: a / b), [a, b]


def _case_pow(rng):
    a = Tensor(rng.uniform(0.5, 2.0, size=_sample_shape(rng, 2)), requires_grad=True)
    p = float(rng.uniform(-2, 3))
    return (lambda: a**p), [a]


def _case_exp(rng):
    a = leaf(rng, *_sample_shape(rng, 2))
    return (lambda: ops.exp(a)), [a]


def _case_log(rng):
    a = Tensor(rng.uniform(0.2, 3.0, size=_sample_shape(rng, 2)), requires_grad=True)
    return (lambda: ops.log(a)), [a]


def _case_sqrt(rng):
    a = Tensor(rng.uniform(0.2, 3.0, size=_sample_shape(rng, 2)), requires_grad=True)
    return (lambda: ops.sqrt(a)), [a]


def _case_relu(rng):
    data = rng.normal(size=_sample_shape(rng, 2))
    data[np.abs(data) < 1e-3] = 0.5  # keep away from the kink
    a = Tensor(data, requires_grad=True)
    return (lambda: ops.relu(a)), [a]


def _case_sigmoid(rng):
    a = Tensor(rng.normal(scale=3.0, size=_sample_shape(rng, 2)), requires_grad=True)
    return (lambda: ops.sigmoid(a)), [a]


def _case_log_sigmoid(rng):
    a = Tensor(rng.normal(scale=3.0, size=_sample_shape(rng, 2)), requires_grad=True)
    return (lambda: ops.log_sigmoid(a)), [a]


def _case_softmax(rng):
    a = leaf(rng, *_sample_shape(rng, 3))
    w = Tensor(rng.normal(size=a.shape))
    axis = int(rng.integers(0, 3))
    return (lambda: ops.softmax(a, axis=axis) * w), [a]


def _case_log_softmax(rng):
    a = leaf(rng, *_sample_shape(rng, 2))
    w = Tensor(rng.normal(size=a.shape))
    return (lambda: ops.log_softmax(a, axis=-1) * w), [a]


def _case_sum(rng):
    a = leaf(rng, *_sample_shape(rng, 3))
    w = Tensor(rng.normal(size=(a.shape[0], a.shape[2])))
    return (lambda: ops.sum(a, axis=1) * w), [a]


def _case_mean(rng):
    a = leaf(rng, *_sample_shape(rng, 3))
    w = Tensor(rng.normal(size=(a.shape[0], 1, a.shape[2])))
    return (lambda: ops.mean(a, axis=1, keepdims=True) * w), [a]


def _case_reshape(rng):
    a = leaf(rng, 2, 3, 4)
    w = Tensor(rng.normal(size=(6, 4)))
    return (lambda: ops.reshape(a, (6, 4)) * w), [a]


def _case_transpose(rng):
    a = leaf(rng, 2, 3, 4)
    perm = tuple(int(i) for i in rng.permutation(3))
    w = Tensor(rng.normal(size=tuple(a.shape[i] for i in perm)))
    return (lambda: ops.transpose(a, perm) * w), [a]


def _case_concat(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    w = Tensor(rng.normal(size=(2, 5)))
    return (lambda: ops.concatenate([a, b], axis=1) * w), [a, b]


def _case_stack(rng):
    a, b = leaf(rng, 3), leaf(rng, 3)
    w = Tensor(rng.normal(size=(3, 2)))
    return (lambda: ops.stack([a, b], axis=1) * w), [a, b]


def _case_getitem(rng):
    a = leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=4)
    w = Tensor(rng.normal(size=(4, 3)))
    return (lambda: a[idx] * w), [a]


def _case_masked_fill(rng):
    a = leaf(rng, 3, 4)
    mask = rng.random((3, 4)) < 0.3
    w = Tensor(rng.normal(size=(3, 4)))
    return (lambda: ops.masked_fill(a, mask, -5.0) * w), [a]


def _case_where(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    cond = rng.random((3, 4)) < 0.5
    return (lambda: ops.where(cond, a, b)), [a, b]


def _case_matmul(rng):
    m, k, n = _sample_shape(rng, 3)
    a, b = leaf(rng, m, k), leaf(rng, k, n)
    return (lambda: a @ b), [a, b]


def _case_conv(rng):
    c = int(rng.integers(1, 3))
    x, w, b = leaf(rng, 1, c, 5, 5), leaf(rng, 2, c, 3, 3), leaf(rng, 2)
    stride = int(rng.integers(1, 3))
    return (lambda: ops.conv2d(x, w, b, stride=stride, padding=1)), [x, w, b]


def _case_conv_1x1(rng):
    x, w = leaf(rng, 2, 3, 3, 4), leaf(rng, 2, 3, 1, 1)
    return (lambda: ops.conv2d(x, w)), [x, w]


def _case_depthwise(rng):
    x, w = leaf(rng, 2, 3, 4, 4), leaf(rng, 3, 1, 3, 3)
    return (lambda: ops.conv2d(x, w, padding=1, groups=3)), [x, w]


def _case_avg_pool(rng):
    x = leaf(rng, 2, 2, 4, 5)
    return (lambda: ops.avg_pool2d(x, 2)), [x]


def _case_gap(rng):
    x = leaf(rng, 2, 3, 3, 2)
    w = Tensor(rng.normal(size=(2, 3)))
    return (lambda: ops.global_avg_pool(x) * w), [x]


def _case_resize(rng):
    x = leaf(rng, 2, 3, 3)
    size = tuple(int(v) for v in rng.integers(1, 7, size=2))
    w = Tensor(rng.normal(size=(2,) + size))
    return (lambda: ops.resize_bilinear(x, size) * w), [x]


def _case_layer_norm(rng):
    x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
    w = Tensor(rng.normal(size=(3, 5)))
    return (lambda: ops.layer_norm(x, g, b) * w), [x, g, b]


def _case_broadcast_to(rng):
    x = leaf(rng, 1, 3)
    w = Tensor(rng.normal(size=(4, 3)))
    return (lambda: ops.broadcast_to(x, (4, 3)) * w), [x]


OP_CASES = {
    name[len("_case_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("_case_")
}


# -- loss terms ------------------------------------------------------------------

from hiq.camp import CampHead, camp_forward  # noqa: E402
from hiq.config import LossConfig  # noqa: E402
from hiq.decoder import LevelDecoder, decode_level, logits_from_decoded  # noqa: E402
from hiq.fusion import AttentionParams, FTBlock, attend, cross_attention  # noqa: E402
from hiq.hierarchy import from_branching  # noqa: E402
from hiq.losses import (  # noqa: E402
    LossTerms,
    binary_cross_entropy_with_logits,
    cluster_focal_loss,
    cosine_similarities,
    cross_entropy,
    focal_term,
    total_loss,
)
from hiq.querybank import QueryBank, fuse_queries  # noqa: E402


def _random_loss_cfg(rng) -> LossConfig:
    return LossConfig(
        alpha=float(rng.uniform(0.2, 1.0)),
        gamma=float(rng.choice([0.0, 0.5, 1.0, 2.0])),
        tau=float(rng.uniform(1.0, 10.0)),
    )


def _loss_cross_entropy(rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = leaf(rng, b, k)
    labels = rng.integers(0, k, size=b)
    return (lambda: cross_entropy(logits, labels)), [logits]


def _loss_cross_entropy_masked(rng):
    b, k = 3, 4
    logits = leaf(rng, b, k)
    valid = np.ones((b, k), dtype=bool)
    valid[:, -1] = False
    labels = rng.integers(0, k - 1, size=b)
    return (lambda: cross_entropy(ops.masked_fill(logits, ~valid, -1e300), labels)), [logits]


def _loss_cosine(rng):
    b, k, d = 3, int(rng.integers(2, 5)), int(rng.integers(2, 6))
    f, q = leaf(rng, b, d), leaf(rng, k, d)
    return (lambda: cosine_similarities(f, q)), [f, q]


def _loss_focal_term(rng):
    logp = Tensor(-rng.uniform(0.05, 3.0, size=(2, 3)), requires_grad=True)
    alpha, gamma = float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.0, 3.0))
    return (lambda: focal_term(logp, alpha, gamma)), [logp]


def _loss_cfl(rng):
    b, k, d = int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    f, q = leaf(rng, b, d), leaf(rng, k, d)
    labels = rng.integers(0, k, size=b)
    cfg = _random_loss_cfg(rng)
    return (lambda: cluster_focal_loss(f, q, labels, cfg)), [f, q]


def _loss_cfl_masked(rng):
    b, k, d = 3, 4, 3
    f, q = leaf(rng, b, d), leaf(rng, b, k, d)
    valid = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]], dtype=bool)
    labels = np.array([3, 1, 0])
    cfg = _random_loss_cfg(rng)
    return (lambda: cluster_focal_loss(f, q, labels, cfg, valid)), [f, q]


def _loss_bce(rng):
    s = leaf(rng, int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    t = (rng.random(s.shape) < 0.4).astype(float)
    return (lambda: binary_cross_entropy_with_logits(s, t)), [s]


def _loss_total(rng):
    b, n1, k2, d = 2, 3, 2, 3
    coarse, fine_logits = leaf(rng, b, n1), leaf(rng, b, k2)
    f1, f2, q1, q2 = leaf(rng, b, d), leaf(rng, b, d), leaf(rng, n1, d), leaf(rng, b, k2, d)
    camp = leaf(rng, b, n1 + k2)
    targets = np.zeros((b, n1 + k2))
    targets[0, [1, n1 + 0]] = 1
    targets[1, [2, n1 + 1]] = 1
    terms = LossTerms(coarse, fine_logits, np.array([1, 2]), np.array([0, 1]),
                      f1, f2, q1, q2, np.ones((b, k2), dtype=bool), camp, targets)
    cfg = _random_loss_cfg(rng)
    return (lambda: total_loss(terms, cfg)[0]), [coarse, fine_logits, f1, f2, q1, q2, camp]


LOSS_CASES = {
    name[len("_loss_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("_loss_")
}


# -- model components --------------------------------------------------------------


def _comp_attend(rng):
    q, k, v = leaf(rng, 2, 3, 4), leaf(rng, 2, 5, 4), leaf(rng, 2, 5, 4)
    return (lambda: attend(q, k, v, 2)), [q, k, v]


def _comp_cross_attention(rng):
    p = AttentionParams(4, 2, rng)
    q, kv = leaf(rng, 1, 3, 4), leaf(rng, 1, 5, 4)
    return (lambda: cross_attention(q, kv, p)), [q, kv] + p.parameters()


def _comp_ft_block(rng):
    block = FTBlock(4, 2, (4, 4), rng)
    block.pos.data[...] = rng.normal(0, 0.1, size=block.pos.shape)
    low, high = leaf(rng, 1, 4, 2, 2), leaf(rng, 1, 4, 4, 4)
    return (lambda: block(low, high)), [low, high, block.pos, block.mix.weight, block.proj_q.pointwise.weight]


def _comp_decoder(rng):
    dec = LevelDecoder(2, 2, 4, 2, rng)
    queries, fused = leaf(rng, 2, 2, 2, 2), leaf(rng, 1, 4, 3, 3)
    return (lambda: logits_from_decoded(decode_level(queries, fused, dec), dec)), [queries, fused, dec.attn.wq.weight]


def _comp_fuse_queries(rng):
    h = from_branching([2, 1, 3])
    bank = QueryBank(rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2)), beta=float(rng.uniform(0.2, 0.8)))
    bank.proj_weight.data += rng.normal(0, 0.1, size=bank.proj_weight.shape)
    ids = rng.integers(0, 3, size=2)
    return (lambda: fuse_queries(bank, h, ids, "train")), bank.parameters()


def _comp_camp(rng):
    head = CampHead(8, 3, 4, rng)
    q1, q2, prior = leaf(rng, 3, 2, 2, 2), leaf(rng, 2, 2, 2, 2, 2), leaf(rng, 2, 3)
    return (lambda: camp_forward(q1, q2, prior, head)), [q1, q2, prior] + head.parameters()


COMPONENT_CASES = {
    name[len("_comp_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("_comp_")
}

ALL_CASES = {**{f"op:{k}": v for k, v in OP_CASES.items()},
             **{f"loss:{k}": v for k, v in LOSS_CASES.items()},
             **{f"component:{k}": v for k, v in COMPONENT_CASES.items()}}
