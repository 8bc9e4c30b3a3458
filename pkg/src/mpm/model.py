"""MPM and its comparison models as pure functions over a parameter dict.

Model kinds:

``mpm``
    TCN instant preferences, a shared detector MLP on [h_i; e_target],
    a general-preference MLP on [e_user; e_target] and an output MLP over
    all predictive vectors.
``no-detector``
    MPM with the detector bypassed (h_i fed to the output MLP directly).
``mpm-attn``
    TCN states pooled by additive self-attention instead of the detector.
``mf``
    Biased matrix factorization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODEL_KINDS = ("mpm", "no-detector", "mpm-attn", "mf")


class ConfigError(ValueError):
    pass


@dataclass
class MpmConfig:
    embedding_dim: int = 32
    history_size: int = 9
    tcn_levels: int = 4
    kernel_size: int = 3
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    mlp_layers: list[int] = field(default_factory=lambda: [64, 128, 64, 32])
    dropout_rate: float = 0.2
    output_mlp_layers: list[int] = field(default_factory=lambda: [128, 64, 32])

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (self.kernel_size - 1) * sum(self.dilations)

    @property
    def predictive_width(self) -> int:
        return self.mlp_layers[-1]

    def validate(self, kind: str = "mpm") -> None:
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
        if self.embedding_dim < 1 or self.history_size < 1:
            raise ConfigError("embedding_dim and history_size must be positive")
        if not self.mlp_layers:
            raise ConfigError("mlp_layers must not be empty")
        if kind == "mf":
            return
        if len(self.dilations) != self.tcn_levels:
            raise ConfigError(f"{self.tcn_levels} TCN levels but {len(self.dilations)} dilations")
        if self.kernel_size < 1 or any(d < 1 for d in self.dilations):
            raise ConfigError("kernel size and dilations must be positive")
        if self.receptive_field < self.history_size:
            raise ConfigError(
                f"receptive field {self.receptive_field} is shorter than history size {self.history_size}"
            )
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if kind == "no-detector" and self.embedding_dim != self.predictive_width:
            raise ConfigError(
                "no-detector feeds h_i where p_i would go, so embedding_dim must equal mlp_layers[-1]"
            )

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict  # name -> Tensor, in creation order


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _add_mlp(params: Params, prefix: str, in_dim: int, widths, rng, dtype) -> int:
    for j, w in enumerate(widths):
        params[f"{prefix}.{j}.weight"] = _uniform(rng, (in_dim, w), 1 / np.sqrt(in_dim), dtype)
        params[f"{prefix}.{j}.bias"] = _zeros((w,), dtype)
        in_dim = w
    return in_dim


def init_params(
    kind: str, config: MpmConfig, num_users: int, num_items: int, seed: int = 0, dtype=np.float32
) -> Params:
    """Fresh parameters: embeddings U(-0.05, 0.05), weights fan-in scaled, biases zero."""
    config.validate(kind)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    dim = config.embedding_dim
    p: Params = {}
    p["user_embedding"] = _uniform(rng, (num_users, dim), 0.05, dtype)
    p["item_embedding"] = _uniform(rng, (num_items, dim), 0.05, dtype)
    if kind == "mf":
        p["user_bias"] = _zeros((num_users,), dtype)
        p["item_bias"] = _zeros((num_items,), dtype)
        p["global_bias"] = _zeros((1,), dtype)
        return _named(p)

    k = config.kernel_size
    for lvl in range(config.tcn_levels):
        for c in range(2):
            p[f"tcn.{lvl}.conv{c}.weight"] = _uniform(rng, (dim, dim, k), 1 / np.sqrt(dim * k), dtype)
            p[f"tcn.{lvl}.conv{c}.bias"] = _zeros((dim,), dtype)
    if kind == "mpm":
        _add_mlp(p, "detector", 2 * dim, config.mlp_layers, rng, dtype)
    if kind == "mpm-attn":
        p["attention.weight"] = _uniform(rng, (dim, dim), 1 / np.sqrt(dim), dtype)
        p["attention.bias"] = _zeros((dim,), dtype)
        p["attention.context"] = _uniform(rng, (dim, 1), 1 / np.sqrt(dim), dtype)
    _add_mlp(p, "general", 2 * dim, config.mlp_layers, rng, dtype)
    width = _add_mlp(p, "output", output_input_width(kind, config), config.output_mlp_layers, rng, dtype)
    p["output.head.weight"] = _uniform(rng, (width, 1), 1 / np.sqrt(width), dtype)
    p["output.head.bias"] = _zeros((1,), dtype)
    return _named(p)


def _named(p: Params) -> Params:
    for name, t in p.items():
        t.name = name
    return p


def output_input_width(kind: str, config: MpmConfig) -> int:
    if kind == "mpm-attn":
        return config.embedding_dim + config.predictive_width
    return (config.history_size + 1) * config.predictive_width


def cast_params(params: Params, dtype) -> Params:
    """Copy of ``params`` in another precision (float64 for gradient checks)."""
    return {n: Tensor(t.data.astype(dtype), requires_grad=True, name=n, dtype=dtype) for n, t in params.items()}


def count_parameters(params: Params, prefix: str | None = None) -> int:
    return int(sum(t.data.size for n, t in params.items() if prefix is None or n.startswith(prefix)))


# ---------------------------------------------------------------------------
# building blocks


def mlp(x: Tensor, params: Params, prefix: str, n_layers: int) -> Tensor:
    for j in range(n_layers):
        x = ad.relu(ad.affine(x, params[f"{prefix}.{j}.weight"], params[f"{prefix}.{j}.bias"]))
    return x


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    single = arr.ndim == 1
    return (arr[None, :] if single else arr), single


def tcn_forward(history_ids, params: Params, config: MpmConfig, training: bool = False, rng=None) -> Tensor:
    """Per-position instant preferences.

    ``history_ids`` of shape [K] gives [K, dim]; [B, K] gives [B, K, dim].
    Each residual block is two dilated causal convolutions with rectifier and
    spatial dropout, added to the block input.
    """
    hist, single = _as_batch(history_ids)
    if hist.shape[1] != config.history_size:
        raise ConfigError(f"history has {hist.shape[1]} items, config expects {config.history_size}")
    b, k = hist.shape
    dim = config.embedding_dim
    x = ad.embedding_gather(params["item_embedding"], hist.T.reshape(-1))
    x = ad.reshape(x, (k, b, dim))  # time-major inside the TCN
    for lvl, d in enumerate(config.dilations):
        y = x
        for c in range(2):
            w, bias = params[f"tcn.{lvl}.conv{c}.weight"], params[f"tcn.{lvl}.conv{c}.bias"]
            y = ad.causal_conv_time_major(y, w, int(d), bias)
            y = ad.dropout(ad.relu(y), config.dropout_rate, training, rng, time_axis=0)
        x = ad.add(x, y)
    if single:
        return ad.reshape(x, (k, dim))
    return ad.transpose(x, (1, 0, 2))


def detector_forward(instants: Tensor, target_items, params: Params, config: MpmConfig) -> Tensor:
    """Predictive vector p_i for every position from [h_i; e_target].

    ``instants`` is [B, K, dim] (or [K, dim] with a scalar target).
    """
    single = instants.data.ndim == 2
    if single:
        instants = ad.reshape(instants, (1,) + instants.shape)
    b, k, dim = instants.shape
    targets = np.asarray(target_items, dtype=np.int64).reshape(-1)
    e = ad.embedding_gather(params["item_embedding"], np.repeat(targets, k))
    z = ad.concat([ad.reshape(instants, (b * k, dim)), e])
    p = mlp(z, params, "detector", len(config.mlp_layers))
    width = config.predictive_width
    return ad.reshape(p, (k, width) if single else (b, k, width))


def general_forward(user_ids, target_items, params: Params, config: MpmConfig) -> Tensor:
    users = np.atleast_1d(np.asarray(user_ids, dtype=np.int64))
    items = np.atleast_1d(np.asarray(target_items, dtype=np.int64))
    eu = ad.embedding_gather(params["user_embedding"], users)
    ei = ad.embedding_gather(params["item_embedding"], items)
    return mlp(ad.concat([eu, ei]), params, "general", len(config.mlp_layers))


def output_forward(p_vectors: Tensor, p_general: Tensor, params: Params, config: MpmConfig) -> Tensor:
    """Score in (0, 1) from the flattened predictive vectors and p_G.

    ``p_vectors`` is [B, K, width] (or [B, width] for an already pooled
    representation); ``p_general`` is [B, width]. Returns [B].
    """
    b = p_general.shape[0]
    flat = ad.reshape(p_vectors, (b, int(np.prod(p_vectors.shape[1:]))))
    z = mlp(ad.concat([flat, p_general]), params, "output", len(config.output_mlp_layers))
    logit = ad.affine(z, params["output.head.weight"], params["output.head.bias"])
    return ad.reshape(ad.sigmoid(logit), (b,))


def _shared_tcn(histories: np.ndarray, params, config, training, rng) -> Tensor:
    # candidates scored against one history reuse a single TCN pass
    uniq, inverse = np.unique(histories, axis=0, return_inverse=True)
    if len(uniq) == len(histories):
        return tcn_forward(histories, params, config, training, rng)
    b, k = histories.shape
    h = tcn_forward(uniq, params, config, training, rng)
    flat = ad.reshape(h, (len(uniq), k * config.embedding_dim))
    return ad.reshape(ad.embedding_gather(flat, inverse.reshape(-1)), (b, k, config.embedding_dim))


def attention_pool(instants: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """s = sum_i a_i h_i with a = softmax_i(w . tanh(W h_i + b))."""
    b, k, dim = instants.shape
    u = ad.tanh(ad.affine(ad.reshape(instants, (b * k, dim)), params["attention.weight"], params["attention.bias"]))
    logits = ad.reshape(ad.affine(u, params["attention.context"]), (b, k))
    weights = ad.softmax(logits)
    return ad.weighted_sum(weights, instants), weights


def predict(
    kind: str,
    params: Params,
    config: MpmConfig,
    users,
    histories,
    targets,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Scores [B] for aligned (user, history, target) triples."""
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if kind == "mf":
        return mf_predict(users, targets, params)
    histories, _ = _as_batch(histories)
    h = _shared_tcn(histories, params, config, training, rng)
    p_general = general_forward(users, targets, params, config)
    if kind == "mpm":
        p = detector_forward(h, targets, params, config)
    elif kind == "no-detector":
        p = h
    elif kind == "mpm-attn":
        p, _ = attention_pool(h, params)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return output_forward(p, p_general, params, config)


def mpm_predict(params, config, users, histories, targets, training=False, rng=None) -> Tensor:
    return predict("mpm", params, config, users, histories, targets, training, rng)


def no_detector_predict(params, config, users, histories, targets, training=False, rng=None) -> Tensor:
    return predict("no-detector", params, config, users, histories, targets, training, rng)


def mpm_attn_predict(params, config, users, histories, targets, training=False, rng=None) -> Tensor:
    return predict("mpm-attn", params, config, users, histories, targets, training, rng)


def mf_predict(user_ids, item_ids, params: Params) -> Tensor:
    """sigmoid(e_u . e_i + b_u + b_i + b)."""
    users = np.atleast_1d(np.asarray(user_ids, dtype=np.int64))
    items = np.atleast_1d(np.asarray(item_ids, dtype=np.int64))
    eu = ad.embedding_gather(params["user_embedding"], users)
    ei = ad.embedding_gather(params["item_embedding"], items)
    dot = ad.reduce_sum(ad.mul(eu, ei), axis=1)
    bu = ad.reshape(ad.embedding_gather(ad.reshape(params["user_bias"], (-1, 1)), users), (len(users),))
    bi = ad.reshape(ad.embedding_gather(ad.reshape(params["item_bias"], (-1, 1)), items), (len(items),))
    bg = ad.reshape(ad.embedding_gather(ad.reshape(params["global_bias"], (1, 1)), np.zeros(len(users), np.int64)), (len(users),))
    return ad.sigmoid(ad.add(ad.add(dot, bu), ad.add(bi, bg)))
