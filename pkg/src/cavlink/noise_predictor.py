"""Conditional mixed-noise estimator with hand-written gradients.

A deliberately small stand-in for a full U-Net denoiser: four 3x3 conv
layers at float64, conditioned by channel-wise concatenation of the noisy
state with the received feature and an additive per-step embedding after
the first layer, plus one long skip connection from that embedded input
representation into the penultimate layer. Small enough that every gradient
is checked against finite differences, yet expressive enough to learn the
mixed-noise target on toy feature maps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn_core
from .cond_diffusion import DiffusionSchedule, forward_diffuse, training_target
from .errors import ConfigurationError, NumericalAbortError
from .feature_core import FeatureMap
from .nn_core import Adam, ConvLayer, init_conv_layer, layer_backward, layer_forward

PARAMS_MAGIC = b"CWDP"
PARAMS_VERSION = 1


@dataclass
class NoisePredictorParams:
    """Layer stack, timestep embedding table, and geometry."""

    in_channels: int
    hidden: int
    num_steps: int
    layers: list[ConvLayer]
    time_emb: np.ndarray  # (num_steps, hidden)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        out.append(self.time_emb)
        return out

    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays()))


def init_params(in_channels: int, hidden: int = 24, num_steps: int = 50,
                rng_seed: int = 0, groups: int = 4,
                weight_scale: float = 0.5) -> NoisePredictorParams:
    rng = np.random.default_rng(rng_seed)
    g = min(groups, hidden)
    layers = [
        init_conv_layer(rng, 2 * in_channels, hidden, True, True, g,
                        weight_scale),
        init_conv_layer(rng, hidden, hidden, True, True, g, weight_scale),
        init_conv_layer(rng, hidden, hidden, True, True, g, weight_scale),
        init_conv_layer(rng, hidden, in_channels, False, False, 1,
                        weight_scale),
    ]
    emb = rng.normal(0.0, 0.02, size=(num_steps, hidden))
    return NoisePredictorParams(in_channels, hidden, num_steps, layers, emb)


def forward_batch(params: NoisePredictorParams, xt: np.ndarray,
                  y: np.ndarray, t: np.ndarray
                  ) -> tuple[np.ndarray, list]:
    """Batched forward pass; returns the estimate and the backprop caches."""
    if xt.shape != y.shape:
        raise ConfigurationError("x_t and y shapes differ")
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > params.num_steps):
        raise ConfigurationError("step index outside the schedule")
    h0 = np.concatenate([xt, y], axis=1)
    emb = params.time_emb[t - 1][:, :, None, None]
    l1, l2, l3, l4 = params.layers
    z1, c1 = layer_forward(l1, h0, extra=emb)
    a1 = c1["pre"]
    z2, c2 = layer_forward(l2, z1)
    z3, c3 = layer_forward(l3, z2, extra=a1)
    out, c4 = layer_forward(l4, z3)
    return out, [c1, c2, c3, c4, t]


def backward_batch(params: NoisePredictorParams, caches: list,
                   dout: np.ndarray) -> dict:
    """Exact gradients of forward_batch for an upstream dout."""
    c1, c2, c3, c4, t = caches
    l1, l2, l3, l4 = params.layers
    dz3, g4, _ = layer_backward(l4, c4, dout)
    dz2, g3, dpre3 = layer_backward(l3, c3, dz3)
    dz1, g2, _ = layer_backward(l2, c2, dz2)
    _, g1, dpre1 = layer_backward(l1, c1, dz1)
    # The skip adds a1 into layer 3's pre-activation, so its gradient joins
    # a1's gradient from the main path. a1 = conv1(h0) + emb.
    da1 = dpre3
    dx1, dw1, db1 = nn_core.conv2d_backward(c1["x"], l1.weight, da1)
    g1["weight"] = g1["weight"] + dw1
    g1["bias"] = g1["bias"] + db1
    demb_map = (dpre1 + da1).sum(axis=(2, 3))  # (B, hidden)
    demb = np.zeros_like(params.time_emb)
    np.add.at(demb, t - 1, demb_map)
    return {"layers": [g1, g2, g3, g4], "time_emb": demb}


def grads_as_arrays(params: NoisePredictorParams, grads: dict
                    ) -> list[np.ndarray]:
    out = []
    for layer, g in zip(params.layers, grads["layers"]):
        out.append(g["weight"])
        out.append(g["bias"])
        if layer.use_norm:
            out.append(g["gamma"])
            out.append(g["beta"])
    out.append(grads["time_emb"])
    return out


def forward(params: NoisePredictorParams, x_t: FeatureMap, y: FeatureMap,
            t: int) -> FeatureMap:
    """Estimate the mixed noise in x_t conditioned on y and the step."""
    est, _ = forward_batch(params, x_t.data[None], y.data[None],
                           np.array([t]))
    return x_t.with_data(est[0])


def make_predictor(params: NoisePredictorParams
                   ) -> Callable[[np.ndarray, np.ndarray, int], np.ndarray]:
    """Adapter for the denoise() chain: ndarray-in, ndarray-out."""
    def predict(x: np.ndarray, y: np.ndarray, t: int) -> np.ndarray:
        est, _ = forward_batch(params, x[None], y[None], np.array([t]))
        return est[0]
    return predict


@dataclass
class TrainBatch:
    """One gradient step's worth of diffused samples."""

    xt: np.ndarray       # (B, C, H, W)
    y: np.ndarray
    t: np.ndarray        # (B,)
    target: np.ndarray
    x0: np.ndarray | None = None


@dataclass
class TrainState:
    """Parameters plus everything the optimizer loop owns."""

    params: NoisePredictorParams
    sched: DiffusionSchedule
    beta_coop: float = 0.1
    beta_diffusion: float = 1.0
    coop_fusion_maps: int = 2
    lr: float = 1e-3
    optimizer: Adam | None = None
    step: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = Adam(self.params.arrays(), lr=self.lr)


def backward(state: TrainState, batch: TrainBatch
             ) -> tuple[dict, float, float, float]:
    """Loss and exact parameter gradients for one batch.

    The loss is beta_diffusion * MSE(estimate, target) plus beta_coop times
    the frozen-fusion consistency term: the squared error that the one-step
    clean-feature estimate would contribute to a mean-fused map.
    """
    if batch.xt.shape[0] < 1:
        raise ConfigurationError("empty training batch")
    est, caches = forward_batch(state.params, batch.xt, batch.y, batch.t)
    n_elem = est.size
    resid = est - batch.target
    loss_diff = float(np.mean(resid ** 2))
    dout = state.beta_diffusion * 2.0 * resid / n_elem

    loss_coop = 0.0
    if state.beta_coop > 0 and batch.x0 is not None:
        i = batch.t - 1
        sab = np.sqrt(state.sched.alpha_bar[i])[:, None, None, None]
        somb = np.sqrt(1.0 - state.sched.alpha_bar[i])[:, None, None, None]
        x0_hat = (batch.xt - somb * est) / sab
        fuse_scale = 1.0 / (state.coop_fusion_maps + 1.0)
        rc = x0_hat - batch.x0
        loss_coop = float(fuse_scale ** 2 * np.mean(rc ** 2))
        dout = dout + state.beta_coop * fuse_scale ** 2 \
            * (2.0 * rc / n_elem) * (-somb / sab)

    loss = state.beta_diffusion * loss_diff + state.beta_coop * loss_coop
    if not np.isfinite(loss):
        raise NumericalAbortError(
            f"non-finite loss at step {state.step}: "
            f"diff={loss_diff} coop={loss_coop} "
            f"|est|max={np.max(np.abs(est))}")
    grads = backward_batch(state.params, caches, dout)
    return grads, loss, loss_diff, loss_coop


def train(state: TrainState, generator, sched: DiffusionSchedule,
          steps: int, rng_seed: int, batch_size: int = 8
          ) -> tuple[NoisePredictorParams, list]:
    """Optimize the estimator on pairs drawn from the scene+link generator.

    generator(rng) must return one (x0, y) FeatureMap pair per call. Each
    sample gets an independent step t and fresh forward-diffusion noise.
    Aborts if the loss exceeds 10x its initial level for 100 consecutive
    steps.
    """
    rng = np.random.default_rng(rng_seed)
    initial_loss = None
    bad_streak = 0
    for _ in range(steps):
        xts, ys, ts, targets, x0s = [], [], [], [], []
        for _ in range(batch_size):
            x0, y = generator(rng)
            t = int(rng.integers(1, sched.T + 1))
            x_t, eps = forward_diffuse(x0, y, t, sched,
                                       int(rng.integers(2 ** 63)))
            xts.append(x_t.data)
            ys.append(y.data)
            ts.append(t)
            targets.append(training_target(x0, y, eps, t, sched))
            x0s.append(x0.data)
        batch = TrainBatch(np.stack(xts), np.stack(ys),
                           np.array(ts, dtype=np.int64), np.stack(targets),
                           np.stack(x0s))
        grads, loss, loss_diff, loss_coop = backward(state, batch)
        state.optimizer.update(state.params.arrays(),
                               grads_as_arrays(state.params, grads))
        state.step += 1
        state.loss_history.append((state.step, loss_diff, loss_coop))
        if initial_loss is None:
            initial_loss = loss
        if loss > 10.0 * initial_loss:
            bad_streak += 1
            if bad_streak >= 100:
                raise NumericalAbortError(
                    f"training diverged: loss {loss} vs initial "
                    f"{initial_loss} for 100 steps")
        else:
            bad_streak = 0
    return state.params, state.loss_history


def loss_curve_csv(history: list, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss_diffusion,loss_coop\n")
        for step, ld, lc in history:
            fh.write(f"{step},{ld!r},{lc!r}\n")


def save_params(path: str | Path, params: NoisePredictorParams) -> None:
    """Binary parameter file: magic, version, layer table, raw f64 LE."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<IIIII", PARAMS_VERSION, params.in_channels,
                             params.hidden, params.num_steps,
                             len(params.layers)))
        for layer in params.layers:
            fh.write(struct.pack("<IIIII", layer.in_channels,
                                 layer.out_channels, int(layer.use_norm),
                                 int(layer.use_act), layer.groups))
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str | Path) -> NoisePredictorParams:
    with open(path, "rb") as fh:
        if fh.read(4) != PARAMS_MAGIC:
            raise ConfigurationError(f"{path}: not a predictor file")
        version, c_in, hidden, num_steps, n_layers = struct.unpack(
            "<IIIII", fh.read(20))
        if version != PARAMS_VERSION:
            raise ConfigurationError(f"{path}: unsupported version {version}")
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
            b = read_arr((cout,))
            gamma = read_arr((cout,)) if use_norm else None
            beta = read_arr((cout,)) if use_norm else None
            layers.append(ConvLayer(w, b, gamma, beta, bool(use_norm),
                                    bool(use_act), groups))
        emb = read_arr((num_steps, hidden))
    return NoisePredictorParams(c_in, hidden, num_steps, layers, emb)
