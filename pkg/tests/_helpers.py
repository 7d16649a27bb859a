"""Sample transformations shared by several test modules."""

import numpy as np

from aesmpn.model import NetworkSample


def permute_flows(sample: NetworkSample, perm) -> NetworkSample:
    """Flow ``k`` of the result is flow ``perm[k]`` of ``sample``."""
    perm = [int(p) for p in perm]
    return NetworkSample(
        l2_features=sample.l2_features.copy(),
        l3_features=sample.l3_features.copy(),
        flow_features=sample.flow_features[perm],
        paths=[list(sample.paths[p]) for p in perm],
        targets=sample.targets[perm],
        sample_id=sample.sample_id,
    )


def relabel_links(sample: NetworkSample, perm_l2, perm_l3) -> NetworkSample:
    """Old L2 link ``i`` becomes ``perm_l2[i]``; likewise for L3 links."""
    p2, p3 = np.asarray(perm_l2), np.asarray(perm_l3)
    l2 = np.empty_like(sample.l2_features)
    l3 = np.empty_like(sample.l3_features)
    l2[p2] = sample.l2_features
    l3[p3] = sample.l3_features
    return NetworkSample(
        l2_features=l2,
        l3_features=l3,
        flow_features=sample.flow_features.copy(),
        paths=[[(int(p2[a]), int(p3[b])) for a, b in path] for path in sample.paths],
        targets=sample.targets.copy(),
        sample_id=sample.sample_id,
    )


def numpy_lstm(cell, h, c, x):
    """Gate-by-gate LSTM on row batches, from the textbook equations."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    hx = np.concatenate([h, x], axis=1)
    gate = lambda k: hx @ getattr(cell, f"W_{k}").value.T + getattr(cell, f"b_{k}").value  # noqa: E731
    f, i, o = sig(gate("f")), sig(gate("i")), sig(gate("o"))
    c_new = f * c + i * np.tanh(gate("C"))
    return o * np.tanh(c_new), c_new
