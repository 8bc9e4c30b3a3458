"""Gradient-check cases shared by the unit and acceptance suites."""

import numpy as np

from mpm import autodiff as ad
from mpm.autodiff import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# every differentiable op, each wrapped as a scalar function of one input
def op_cases(rng):
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    filt = rng.normal(size=(2, 3, 3))
    other = rng.normal(size=(2, 4))
    table_ids = [0, 2, 2, 1]
    vals = rng.normal(size=(2, 4, 3))
    wts = rng.normal(size=(2, 4))
    y = np.array([1, 0, 1, 0, 1, 1])
    cases = {
        "affine.input": ((2, 4), lambda x: ad.reduce_sum(ad.affine(x, t64(w), t64(b)))),
        "affine.weight": ((4, 3), lambda x: ad.reduce_sum(ad.mul(ad.affine(t64(other), x, t64(b)), ad.affine(t64(other), x, t64(b))))),
        "affine.bias": ((3,), lambda x: ad.reduce_sum(ad.sigmoid(ad.affine(t64(other), t64(w), x)))),
        "conv.input": ((2, 3, 6), lambda x: ad.reduce_sum(ad.sigmoid(ad.dilated_causal_conv1d(x, t64(filt), 2)))),
        "conv.filters": ((2, 3, 3), lambda x: ad.reduce_sum(ad.sigmoid(ad.dilated_causal_conv1d(t64(vals.transpose(0, 2, 1)), x, 1)))),
        "conv.time_major": ((5, 2, 3), lambda x: ad.reduce_sum(ad.tanh(ad.causal_conv_time_major(x, t64(filt), 3, t64(b[:2]))))),
        "relu": ((3, 4), lambda x: ad.reduce_sum(ad.mul(ad.relu(x), ad.relu(x)))),
        "sigmoid": ((5,), lambda x: ad.reduce_sum(ad.sigmoid(x))),
        "tanh": ((5,), lambda x: ad.reduce_sum(ad.tanh(x))),
        "concat": ((2, 3), lambda x: ad.reduce_sum(ad.sigmoid(ad.concat([x, t64(other), x])))),
        "gather": ((3, 2), lambda x: ad.reduce_sum(ad.sigmoid(ad.embedding_gather(x, table_ids)))),
        "dropout": ((2, 3, 4), lambda x: ad.reduce_sum(ad.sigmoid(ad.dropout(x, 0.3, True, np.random.default_rng(5))))),
        "softmax": ((2, 4), lambda x: ad.reduce_sum(ad.mul(ad.softmax(x), t64(other)))),
        "weighted_sum.weights": ((2, 4), lambda x: ad.reduce_sum(ad.sigmoid(ad.weighted_sum(x, t64(vals))))),
        "weighted_sum.values": ((2, 4, 3), lambda x: ad.reduce_sum(ad.sigmoid(ad.weighted_sum(t64(wts), x)))),
        "transpose_reshape": ((2, 3, 4), lambda x: ad.reduce_sum(ad.sigmoid(ad.reshape(ad.transpose(x, (2, 0, 1)), (4, 6))))),
        "bce": ((6,), lambda x: ad.bce_loss(ad.sigmoid(x), y)),
    }
    return cases
