"""Recurrent policy-value networks for the two instrument agents.

Image architecture: five stride-2 convolution+ReLU stages (kernel 4,
channels 32..512), a 1024-wide dense layer, an LSTM of 512 units that also
receives the previous action as a one-hot, a 1024-wide dense+ReLU layer and
a final dense layer of 10 outputs (9 action logits + 1 state value).
Feature architecture: two dense-128+ReLU layers, LSTM 64, dense 10.
The two agents never share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_ACTIONS = 9
HEAD_OUTPUTS = N_ACTIONS + 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; stored with checkpoints and compared on load."""

    mode: str = "features"                      # "features" | "image"
    feature_dim: int = 25
    hidden_dims: tuple[int, ...] = (128, 128)
    lstm_size: int = 64
    image_size: tuple[int, int] = (64, 64)      # (width, height)
    conv_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    conv_kernel: int = 4
    conv_stride: int = 2
    fc_pre_lstm: int = 1024
    image_lstm_size: int = 512
    fc_post_lstm: int = 1024

    def descriptor(self) -> dict:
        return {
            "mode": self.mode,
            "feature_dim": self.feature_dim,
            "hidden_dims": list(self.hidden_dims),
            "lstm_size": self.lstm_size,
            "image_size": list(self.image_size),
            "conv_channels": list(self.conv_channels),
            "conv_kernel": self.conv_kernel,
            "conv_stride": self.conv_stride,
            "fc_pre_lstm": self.fc_pre_lstm,
            "image_lstm_size": self.image_lstm_size,
            "fc_post_lstm": self.fc_post_lstm,
        }

    @staticmethod
    def from_descriptor(data: dict) -> "ArchSpec":
        return ArchSpec(
            mode=data["mode"], feature_dim=data["feature_dim"],
            hidden_dims=tuple(data["hidden_dims"]), lstm_size=data["lstm_size"],
            image_size=tuple(data["image_size"]),
            conv_channels=tuple(data["conv_channels"]),
            conv_kernel=data["conv_kernel"], conv_stride=data["conv_stride"],
            fc_pre_lstm=data["fc_pre_lstm"],
            image_lstm_size=data["image_lstm_size"],
            fc_post_lstm=data["fc_post_lstm"])

    def recurrent_size(self) -> int:
        return self.lstm_size if self.mode == "features" else self.image_lstm_size

    def conv_output_elems(self) -> int:
        w, h = self.image_size
        for _ in self.conv_channels:
            w = (w + 2 - self.conv_kernel) // self.conv_stride + 1
            h = (h + 2 - self.conv_kernel) // self.conv_stride + 1
        return w * h * self.conv_channels[-1]


def param_count_formula(spec: ArchSpec) -> int:
    """Closed-form parameter count; guards against architecture drift."""
    total = 0
    if spec.mode == "features":
        prev = spec.feature_dim
        for h in spec.hidden_dims:
            total += prev * h + h
            prev = h
        lstm_in = prev + N_ACTIONS
        lstm = spec.lstm_size
        total += lstm_in * 4 * lstm + lstm * 4 * lstm + 4 * lstm
        total += lstm * HEAD_OUTPUTS + HEAD_OUTPUTS
        return total
    k = spec.conv_kernel
    prev_c = 3
    for c in spec.conv_channels:
        total += k * k * prev_c * c + c
        prev_c = c
    flat = spec.conv_output_elems()
    total += flat * spec.fc_pre_lstm + spec.fc_pre_lstm
    lstm_in = spec.fc_pre_lstm + N_ACTIONS
    lstm = spec.image_lstm_size
    total += lstm_in * 4 * lstm + lstm * 4 * lstm + 4 * lstm
    total += lstm * spec.fc_post_lstm + spec.fc_post_lstm
    total += spec.fc_post_lstm * HEAD_OUTPUTS + HEAD_OUTPUTS
    return total


def _uniform_fanin(rng, shape, dtype):
    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[:-1]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _orthogonal_blocks(rng, size, n_blocks, dtype):
    """Per-gate orthogonal recurrent weights, concatenated column-wise."""
    blocks = []
    for _ in range(n_blocks):
        a = rng.standard_normal((size, size))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        blocks.append(q)
    return np.concatenate(blocks, axis=1).astype(dtype)


class PolicyValueNet:
    """Per-agent parameter set producing action logits and a value estimate."""

    def __init__(self, spec: ArchSpec, agent: str, seed: int = 0,
                 dtype=np.float32):
        self.spec = spec
        self.agent = agent
        self.dtype = dtype
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & 0x7FFFFFFF, _agent_key(agent)]))
        self.params: dict[str, Tensor] = {}
        self._build(rng)

    def _add(self, name, values):
        self.params[name] = ad.parameter(values)

    def _build(self, rng):
        spec = self.spec
        dt = self.dtype
        if spec.mode == "features":
            prev = spec.feature_dim
            for i, h in enumerate(spec.hidden_dims):
                self._add(f"fc{i}_w", _uniform_fanin(rng, (prev, h), dt))
                self._add(f"fc{i}_b", np.zeros(h, dtype=dt))
                prev = h
            lstm, lstm_in = spec.lstm_size, prev + N_ACTIONS
        else:
            flat = spec.conv_output_elems()
            if flat < spec.conv_channels[-1]:
                raise ad.GraphError(
                    f"image {spec.image_size} collapses to nothing after "
                    f"{len(spec.conv_channels)} stride-{spec.conv_stride} convs")
            prev_c = 3
            for i, c in enumerate(spec.conv_channels):
                shape = (spec.conv_kernel, spec.conv_kernel, prev_c, c)
                self._add(f"conv{i}_w", _uniform_fanin(rng, shape, dt))
                self._add(f"conv{i}_b", np.zeros(c, dtype=dt))
                prev_c = c
            self._add("fc_pre_w", _uniform_fanin(rng, (flat, spec.fc_pre_lstm), dt))
            self._add("fc_pre_b", np.zeros(spec.fc_pre_lstm, dtype=dt))
            lstm, lstm_in = spec.image_lstm_size, spec.fc_pre_lstm + N_ACTIONS

        self._add("lstm_wih", _uniform_fanin(rng, (lstm_in, 4 * lstm), dt))
        self._add("lstm_whh", _orthogonal_blocks(rng, lstm, 4, dt))
        self._add("lstm_b", np.zeros(4 * lstm, dtype=dt))

        head_in = lstm
        if spec.mode == "image":
            self._add("fc_post_w",
                      _uniform_fanin(rng, (lstm, spec.fc_post_lstm), dt))
            self._add("fc_post_b", np.zeros(spec.fc_post_lstm, dtype=dt))
            head_in = spec.fc_post_lstm
        # Near-uniform initial policy: tiny final-layer weights.
        self._add("out_w",
                  0.01 * _uniform_fanin(rng, (head_in, HEAD_OUTPUTS), dt))
        self._add("out_b", np.zeros(HEAD_OUTPUTS, dtype=dt))

    # -- forward ---------------------------------------------------------

    def initial_state(self, batch: int):
        size = self.spec.recurrent_size()
        return (np.zeros((batch, size), dtype=self.dtype),
                np.zeros((batch, size), dtype=self.dtype))

    def forward(self, observation, prev_action_onehot, state):
        """One step: (logits (B,9), value (B,), new recurrent state).

        ``state`` entries may be numpy arrays (rollouts) or Tensors
        (backprop through time); outputs are Tensors either way.
        """
        spec = self.spec
        p = self.params
        obs = np.asarray(observation)
        if spec.mode == "features":
            if obs.ndim == 1:
                obs = obs[None, :]
            if obs.shape[-1] != spec.feature_dim:
                raise ad.GraphError(
                    f"observation dim {obs.shape[-1]} != {spec.feature_dim}")
            x = Tensor(obs.astype(self.dtype))
            for i in range(len(spec.hidden_dims)):
                x = ad.relu(ad.add(ad.matmul(x, p[f"fc{i}_w"]), p[f"fc{i}_b"]))
        else:
            if obs.ndim == 3:
                obs = obs[None]
            w, h = spec.image_size
            if obs.shape[1:] != (h, w, 3):
                raise ad.GraphError(
                    f"image shape {obs.shape[1:]} != {(h, w, 3)}")
            x = Tensor((obs.astype(self.dtype) / 255.0
                        if obs.dtype == np.uint8 else obs.astype(self.dtype)))
            for i in range(len(spec.conv_channels)):
                x = ad.conv2d(x, p[f"conv{i}_w"], spec.conv_stride, pad=1)
                x = ad.relu(ad.add(x, p[f"conv{i}_b"]))
            x = ad.reshape(x, (x.shape[0], -1))
            x = ad.add(ad.matmul(x, p["fc_pre_w"]), p["fc_pre_b"])

        onehot = np.asarray(prev_action_onehot, dtype=self.dtype)
        if onehot.ndim == 1:
            onehot = onehot[None, :]
        if onehot.shape[-1] != N_ACTIONS:
            raise ad.GraphError("prev_action_onehot must have 9 entries")
        sums = onehot.sum(axis=-1)
        if not np.all((np.abs(sums - 1.0) < 1e-6) | (np.abs(sums) < 1e-6)):
            raise ad.GraphError("prev_action_onehot rows must sum to 0 or 1")

        h_prev, c_prev = state
        h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
        c_prev = c_prev if isinstance(c_prev, Tensor) else Tensor(c_prev)

        lstm_in = ad.concat([x, Tensor(onehot)], axis=-1)
        gates = ad.add(ad.add(ad.matmul(lstm_in, p["lstm_wih"]),
                              ad.matmul(h_prev, p["lstm_whh"])), p["lstm_b"])
        size = spec.recurrent_size()
        i_g = ad.sigmoid(ad.slice_cols(gates, 0, size))
        f_g = ad.sigmoid(ad.slice_cols(gates, size, 2 * size))
        g_g = ad.tanh(ad.slice_cols(gates, 2 * size, 3 * size))
        o_g = ad.sigmoid(ad.slice_cols(gates, 3 * size, 4 * size))
        c_new = ad.add(ad.mul(f_g, c_prev), ad.mul(i_g, g_g))
        h_new = ad.mul(o_g, ad.tanh(c_new))

        y = h_new
        if spec.mode == "image":
            y = ad.relu(ad.add(ad.matmul(y, p["fc_post_w"]), p["fc_post_b"]))
        out = ad.add(ad.matmul(y, p["out_w"]), p["out_b"])
        logits = ad.slice_cols(out, 0, N_ACTIONS)
        value = ad.reshape(ad.slice_cols(out, N_ACTIONS, HEAD_OUTPUTS), (-1,))
        return logits, value, (h_new, c_new)

    # -- bookkeeping -------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(t.values.size for t in self.params.values())

    def gradients(self):
        """Per-parameter gradients; parameters untouched by backward get 0."""
        return [t.grad if t.grad is not None else np.zeros_like(t.values)
                for t in self.params.values()]

    def zero_grads(self):
        ad.zero_grads(self.parameters())

    def get_weights(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params.items()}

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in weights or weights[k].shape != t.values.shape:
                raise ad.GraphError(f"weight {k} missing or mismatched")
            t.values = weights[k].astype(self.dtype).copy()

    def cast(self, dtype) -> "PolicyValueNet":
        self.dtype = dtype
        for t in self.params.values():
            t.values = t.values.astype(dtype)
        return self


def _agent_key(agent: str) -> int:
    return int.from_bytes(agent.encode()[:4].ljust(4, b"\0"), "little")


def action_onehot(action_ids, batch=None) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(action_ids, dtype=np.int64))
    out = np.zeros((len(ids), N_ACTIONS), dtype=np.float32)
    valid = ids >= 0                       # -1 encodes "episode start"
    out[np.arange(len(ids))[valid], ids[valid]] = 1.0
    return out


def sample_action(logits, rng):
    """Sample from the categorical softmax distribution.

    Returns (action ids, log-probs at the sampled ids, entropies), all
    numpy.  The rng advances deterministically.
    """
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    if values.ndim == 1:
        values = values[None, :]
    if not np.all(np.isfinite(values)):
        raise ad.GraphError("logits must be finite")
    shifted = values.astype(np.float64)
    shifted -= shifted.max(axis=-1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    u = rng.random(values.shape[0])
    cdf = np.cumsum(p, axis=-1)
    actions = (u[:, None] >= cdf).sum(axis=-1)
    actions = np.minimum(actions, N_ACTIONS - 1).astype(np.int64)
    taken = log_p[np.arange(len(actions)), actions]
    entropy = -(p * log_p).sum(axis=-1)
    return actions, taken, entropy


def greedy_action(logits) -> np.ndarray:
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    if values.ndim == 1:
        values = values[None, :]
    return values.argmax(axis=-1)


def grad_check(net: PolicyValueNet, loss_builder, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    The net is cast to float64 for the check.  Intended for small nets
    (~10k parameters); cost grows linearly with parameter count.
    """
    if net.param_count() > 20000:
        raise ad.GraphError("grad_check is for small nets (<= ~10k params)")
    net.cast(np.float64)
    net.zero_grads()
    loss = loss_builder(net)
    ad.backward(loss)
    analytic = [g.copy() for g in net.gradients()]

    worst = 0.0
    for tensor, grad in zip(net.parameters(), analytic):
        flat = tensor.values.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            up = float(loss_builder(net).values)
            flat[idx] = keep - eps
            down = float(loss_builder(net).values)
            flat[idx] = keep
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(gflat[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[idx] - numeric) / denom)
    return worst
