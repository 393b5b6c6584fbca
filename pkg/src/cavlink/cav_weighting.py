"""CAV-level adaptive weighting and the compute-saving bypass gate.

A shared two-layer conv embedding maps a feature map to a 32-d vector via
global average pooling; a CAV's weight is a logistic-calibrated cosine
similarity between its received feature's embedding and the ego feature's
embedding, always inside (0, 1). The embedding is trained self-supervised:
lightly distorted replicas of a scene are pulled toward the ego embedding
while heavily distorted and mismatched-scene replicas are pushed away, then
a two-parameter affine calibration pins the light/heavy medians to high/low
weights. The gate bypasses the denoiser whenever the weight falls below its
threshold (0.6 by default, boundary inclusive on the denoise side).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericalAbortError
from .feature_core import FeatureMap
from .nn_core import Adam, ConvLayer, init_conv_layer, layer_backward, layer_forward

WEIGHT_MAGIC = b"CWDW"
WEIGHT_VERSION = 1
EMBED_DIM = 32


@dataclass
class WeightingModel:
    """Shared conv embedding plus the affine logistic calibration (a, b)."""

    in_channels: int
    layers: list[ConvLayer]
    a: float = 1.0
    b: float = 0.0

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        return out


def init_weighting_model(in_channels: int, rng_seed: int = 0
                         ) -> WeightingModel:
    rng = np.random.default_rng(rng_seed)
    layers = [
        init_conv_layer(rng, in_channels, 16, True, True, groups=4),
        init_conv_layer(rng, 16, EMBED_DIM, True, True, groups=4),
    ]
    return WeightingModel(in_channels, layers)


def embed_batch(model: WeightingModel, x: np.ndarray
                ) -> tuple[np.ndarray, list]:
    """Embed (B, C, H, W) maps into (B, EMBED_DIM) pooled vectors."""
    h = x
    caches = []
    for layer in model.layers:
        h, cache = layer_forward(layer, h)
        caches.append(cache)
    return h.mean(axis=(2, 3)), caches


def embed_backward(model: WeightingModel, caches: list, de: np.ndarray,
                   feat_shape: tuple) -> list[np.ndarray]:
    """Gradients of embed_batch w.r.t. the model arrays."""
    B, _, H, W = feat_shape
    d = np.broadcast_to(de[:, :, None, None] / (H * W),
                        (B, de.shape[1], H, W)).copy()
    grads = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        d, g, _ = layer_backward(layer, cache, d)
        layer_grads = [g["weight"], g["bias"]]
        if layer.use_norm:
            layer_grads += [g["gamma"], g["beta"]]
        grads = layer_grads + grads
    return grads


def _cosine(e1: np.ndarray, e2: np.ndarray) -> float:
    n1 = float(np.linalg.norm(e1))
    n2 = float(np.linalg.norm(e2))
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return float(np.dot(e1, e2) / (n1 * n2))


def weight(model: WeightingModel, f_ego: FeatureMap, f_k: FeatureMap
           ) -> float:
    """Score the k-th CAV's received feature against the ego feature."""
    if f_ego.shape != f_k.shape:
        raise ConfigurationError("ego and CAV shapes differ")
    if not (np.all(np.isfinite(f_ego.data)) and np.all(np.isfinite(f_k.data))):
        raise ConfigurationError("weighting input contains NaN or Inf")
    e, _ = embed_batch(model, np.stack([f_ego.data, f_k.data]))
    cos = _cosine(e[0], e[1])
    return float(1.0 / (1.0 + np.exp(-(model.a * cos + model.b))))


def apply_weight(w_k: float, f_k: FeatureMap) -> FeatureMap:
    """Scale the whole received map by the CAV weight."""
    if not 0.0 <= w_k <= 1.0:
        raise ConfigurationError(f"weight {w_k} outside [0, 1]")
    return f_k.with_data(w_k * f_k.data)


def contrastive_loss_and_grads(model: WeightingModel, ego: np.ndarray,
                               light: np.ndarray, heavy: np.ndarray,
                               temperature: float = 0.1
                               ) -> tuple[float, list[np.ndarray]]:
    """InfoNCE over normalized embeddings.

    For each scene the positive is its own light replica; negatives are
    every heavy replica in the batch plus light replicas of other scenes.
    Returns the loss and gradients aligned with model.arrays().
    """
    B = ego.shape[0]
    stacked = np.concatenate([ego, light, heavy], axis=0)
    emb, caches = embed_batch(model, stacked)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise NumericalAbortError("degenerate (zero) embedding in batch")
    unit = emb / norms
    ue, ul, uh = unit[:B], unit[B:2 * B], unit[2 * B:]

    logits = np.concatenate([ue @ ul.T, ue @ uh.T], axis=1) / temperature
    shift = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shift)
    softmax = expz / expz.sum(axis=1, keepdims=True)
    pos = np.arange(B)
    loss = float(np.mean(-shift[pos, pos]
                         + np.log(expz.sum(axis=1))))

    dlogits = softmax.copy()
    dlogits[pos, pos] -= 1.0
    dlogits /= (temperature * B)
    due = dlogits[:, :B] @ ul + dlogits[:, B:] @ uh
    dul = dlogits[:, :B].T @ ue
    duh = dlogits[:, B:].T @ ue
    dunit = np.concatenate([due, dul, duh], axis=0)
    # d(e/|e|): project out the radial component and divide by the norm.
    demb = (dunit - unit * np.sum(dunit * unit, axis=1, keepdims=True)) / norms
    grads = embed_backward(model, caches, demb, stacked.shape)
    return loss, grads


def calibrate(model: WeightingModel, cos_light: np.ndarray,
              cos_heavy: np.ndarray, hi: float = 0.85, lo: float = 0.2
              ) -> WeightingModel:
    """Fit (a, b) so the pool medians map to the hi/lo weights."""
    med_l = float(np.median(cos_light))
    med_h = float(np.median(cos_heavy))
    if med_l - med_h < 1e-3:
        raise NumericalAbortError(
            f"embeddings do not separate light/heavy pools "
            f"(medians {med_l:.4f} vs {med_h:.4f})")
    logit = lambda p: float(np.log(p / (1.0 - p)))
    a = (logit(hi) - logit(lo)) / (med_l - med_h)
    b = logit(hi) - a * med_l
    return WeightingModel(model.in_channels, model.layers, a, b)


def train_weighting(model: WeightingModel, generator, rng_seed: int,
                    steps: int = 300, batch_size: int = 8,
                    temperature: float = 0.1, lr: float = 1e-3,
                    calibration_scenes: int = 64
                    ) -> tuple[WeightingModel, list]:
    """Self-supervised contrastive training followed by calibration.

    generator(rng) must return one (f_ego, f_light, f_heavy) FeatureMap
    triple per call, where light means a mildly distorted replica of the
    scene's shared feature and heavy a severely distorted one.
    """
    rng = np.random.default_rng(rng_seed)
    opt = Adam(model.arrays(), lr=lr)
    history = []
    for _ in range(steps):
        egos, lights, heavies = [], [], []
        for _ in range(batch_size):
            f_ego, f_light, f_heavy = generator(rng)
            egos.append(f_ego.data)
            lights.append(f_light.data)
            heavies.append(f_heavy.data)
        loss, grads = contrastive_loss_and_grads(
            model, np.stack(egos), np.stack(lights), np.stack(heavies),
            temperature)
        if not np.isfinite(loss):
            raise NumericalAbortError(f"weighting loss became {loss}")
        opt.update(model.arrays(), grads)
        history.append(loss)

    cos_light, cos_heavy = [], []
    for _ in range(calibration_scenes):
        f_ego, f_light, f_heavy = generator(rng)
        e, _ = embed_batch(model, np.stack([f_ego.data, f_light.data,
                                            f_heavy.data]))
        cos_light.append(_cosine(e[0], e[1]))
        cos_heavy.append(_cosine(e[0], e[2]))
    model = calibrate(model, np.asarray(cos_light), np.asarray(cos_heavy))
    return model, history


@dataclass
class GatePolicy:
    """Bypass policy: denoise at or above the threshold, bypass below."""

    threshold: float = 0.6
    denoise_count: int = 0
    bypass_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError("gate threshold must lie in [0, 1]")

    @property
    def decisions(self) -> int:
        return self.denoise_count + self.bypass_count


def gate(policy: GatePolicy, w_k: float) -> str:
    """Decide whether the denoiser runs for this CAV frame."""
    if not 0.0 <= w_k <= 1.0:
        raise ConfigurationError(f"weight {w_k} outside [0, 1]")
    if w_k < policy.threshold:
        policy.bypass_count += 1
        return "bypass"
    policy.denoise_count += 1
    return "denoise"


def save_weighting(path: str | Path, model: WeightingModel) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<III", WEIGHT_VERSION, model.in_channels,
                             len(model.layers)))
        fh.write(struct.pack("<dd", model.a, model.b))
        for layer in model.layers:
            fh.write(struct.pack("<IIIII", layer.in_channels,
                                 layer.out_channels, int(layer.use_norm),
                                 int(layer.use_act), layer.groups))
        for arr in model.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weighting(path: str | Path) -> WeightingModel:
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHT_MAGIC:
            raise ConfigurationError(f"{path}: not a weighting model file")
        version, c_in, n_layers = struct.unpack("<III", fh.read(12))
        if version != WEIGHT_VERSION:
            raise ConfigurationError(f"{path}: unsupported version {version}")
        a, b = struct.unpack("<dd", fh.read(16))
        specs = [struct.unpack("<IIIII", fh.read(20))
                 for _ in range(n_layers)]
        layers = []

        def read_arr(shape):
            n = int(np.prod(shape))
            data = np.frombuffer(fh.read(8 * n), dtype="<f8")
            if data.size != n:
                raise ConfigurationError(f"{path}: truncated parameters")
            return data.reshape(shape).astype(np.float64)

        for cin, cout, use_norm, use_act, groups in specs:
            w = read_arr((cout, cin, 3, 3))
            bias = read_arr((cout,))
            gamma = read_arr((cout,)) if use_norm else None
            beta = read_arr((cout,)) if use_norm else None
            layers.append(ConvLayer(w, bias, gamma, beta, bool(use_norm),
                                    bool(use_act), groups))
    return WeightingModel(c_in, layers, a, b)
