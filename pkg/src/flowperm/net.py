"""Trainable velocity model with exact hand-rolled reverse-mode gradients.

A compact feed-forward pair: a context encoder maps instance observables to
an embedding h, and a velocity head maps [flattened state (optional), h,
time (optional)] to an n*n output that callers project with ``center``.
Parameters live in one flat float64 vector (with per-layer views into it),
which keeps the optimizer, finite-difference checks, and checkpointing
simple.  tanh keeps everything smooth enough for central-difference
gradient verification.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .matgeo import center

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, wrong version, or incompatible."""


def _tanh(z):
    return np.tanh(z)


class VelocityNet:
    """Context encoder + velocity head over flat parameters.

    conditioning flags: uses_state feeds the current state into the head
    (distinct trajectories then bend independently); without it the velocity
    depends on the context alone and is constant along a trajectory.
    uses_time appends the scalar time to the head input.
    """

    def __init__(
        self,
        n: int,
        context_dim: int,
        uses_state: bool = True,
        uses_time: bool = False,
        enc_widths: tuple[int, int] = (128, 128),
        head_widths: tuple[int, int] = (256, 256),
        init_seed: int = 0,
    ):
        if n < 2 or context_dim < 1:
            raise ValueError("need n >= 2 and context_dim >= 1")
        self.n = n
        self.context_dim = context_dim
        self.uses_state = bool(uses_state)
        self.uses_time = bool(uses_time)
        self.enc_widths = tuple(int(w) for w in enc_widths)
        self.head_widths = tuple(int(w) for w in head_widths)
        self.init_seed = init_seed

        head_in = (n * n if self.uses_state else 0) + self.enc_widths[-1] + (
            1 if self.uses_time else 0
        )
        self._enc_dims = [context_dim, *self.enc_widths]
        self._head_dims = [head_in, *self.head_widths, n * n]

        shapes = []
        for dims in (self._enc_dims, self._head_dims):
            for din, dout in zip(dims[:-1], dims[1:]):
                shapes.append((din, dout))
        self._shapes = shapes
        self.param_count = sum(din * dout + dout for din, dout in shapes)
        self.params = np.zeros(self.param_count)
        self._bind_views()
        self._init_params()

    def _bind_views(self) -> None:
        """Per-layer (W, b) views into the flat parameter vector."""
        self._layers = []
        offset = 0
        for din, dout in self._shapes:
            w = self.params[offset : offset + din * dout].reshape(din, dout)
            offset += din * dout
            b = self.params[offset : offset + dout]
            offset += dout
            self._layers.append((w, b))
        self._enc_layers = self._layers[: len(self._enc_dims) - 1]
        self._head_layers = self._layers[len(self._enc_dims) - 1 :]

    def _init_params(self) -> None:
        # uniform fan-in scaling; final head layer near zero so early
        # velocities are small and the first ODE steps stay tame
        rng = np.random.default_rng(self.init_seed)
        for idx, (w, b) in enumerate(self._layers):
            scale = 1.0 / math.sqrt(w.shape[0])
            if idx == len(self._layers) - 1:
                scale *= 1e-3
            w[...] = rng.uniform(-scale, scale, size=w.shape)
            b[...] = 0.0

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {flat.shape}")
        self.params[...] = flat

    def spec(self) -> dict:
        return {
            "n": self.n,
            "context_dim": self.context_dim,
            "uses_state": self.uses_state,
            "uses_time": self.uses_time,
            "enc_widths": list(self.enc_widths),
            "head_widths": list(self.head_widths),
            "init_seed": self.init_seed,
        }

    # ------------------------------------------------------------- forward

    def encode_context(self, ctx: np.ndarray) -> np.ndarray:
        """Deterministic context embedding; accepts (dc,) or (B, dc)."""
        a = np.asarray(ctx, dtype=np.float64)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.shape[1] != self.context_dim:
            raise ValueError(f"context dim {a.shape[1]} != expected {self.context_dim}")
        for w, b in self._enc_layers:
            a = _tanh(a @ w + b)
        return a[0] if single else a

    def _head_input(self, x_flat: np.ndarray, h: np.ndarray, t) -> np.ndarray:
        parts = []
        if self.uses_state:
            parts.append(x_flat)
        parts.append(h)
        if self.uses_time:
            parts.append(np.asarray(t, dtype=np.float64).reshape(-1, 1))
        return np.concatenate(parts, axis=1)

    def raw_output(self, x: np.ndarray, h: np.ndarray, t=0.0) -> np.ndarray:
        """Unprojected head output, reshaped to (..., n, n)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        batch = x.shape[0]
        h = np.asarray(h, dtype=np.float64)
        if h.ndim == 1:
            h = np.broadcast_to(h, (batch, h.shape[0]))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        a = self._head_input(x.reshape(batch, -1), h, t)
        last = len(self._head_layers) - 1
        for idx, (w, b) in enumerate(self._head_layers):
            a = a @ w + b
            if idx < last:
                a = _tanh(a)
        out = a.reshape(batch, self.n, self.n)
        return out[0] if single else out

    def velocity(self, x: np.ndarray, h: np.ndarray, t=0.0) -> np.ndarray:
        """Tangent-space velocity: the head output passed through center.

        The projection is unconditional, so row/column sums of the result
        vanish for any parameter values, trained or not.
        """
        return center(self.raw_output(x, h, t))

    # ------------------------------------------------------- loss/gradient

    def loss_and_grad(
        self,
        x: np.ndarray,
        ctx: np.ndarray,
        t: np.ndarray,
        targets: np.ndarray,
    ) -> tuple[float, np.ndarray]:
        """Mean squared Frobenius velocity-regression error and its gradient.

        Returns (loss, grad) where grad is the exact reverse-mode derivative
        with respect to the full flat parameter vector, encoder included.
        """
        x = np.asarray(x, dtype=np.float64)
        ctx = np.asarray(ctx, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError("x must be (B, n, n)")
        batch = x.shape[0]
        if batch == 0:
            raise ValueError("empty batch")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))

        # encoder forward with caches
        enc_acts = [ctx]
        a = ctx
        for w, b in self._enc_layers:
            a = _tanh(a @ w + b)
            enc_acts.append(a)
        h = a

        # head forward with caches
        head_acts = [self._head_input(x.reshape(batch, -1), h, t)]
        a = head_acts[0]
        last = len(self._head_layers) - 1
        for idx, (w, b) in enumerate(self._head_layers):
            a = a @ w + b
            if idx < last:
                a = _tanh(a)
            head_acts.append(a)

        out = head_acts[-1].reshape(batch, self.n, self.n)
        resid = center(out) - targets
        loss = float((resid * resid).sum() / batch)
        if not np.isfinite(loss):
            bad = np.nonzero(~np.isfinite((resid * resid).sum(axis=(1, 2))))[0]
            raise FloatingPointError(
                f"non-finite loss at batch index {bad[0] if bad.size else '?'}"
            )

        grad = np.zeros_like(self.params)
        grad_layers = self._grad_views(grad)
        n_enc = len(self._enc_layers)

        # d loss / d raw output; center is self-adjoint
        delta = (2.0 / batch) * center(resid).reshape(batch, -1)
        for idx in range(len(self._head_layers) - 1, -1, -1):
            w, _ = self._head_layers[idx]
            gw, gb = grad_layers[n_enc + idx]
            act_in = head_acts[idx]
            gw += act_in.T @ delta
            gb += delta.sum(axis=0)
            delta = delta @ w.T
            if idx > 0:
                delta = delta * (1.0 - head_acts[idx] * head_acts[idx])

        # split the head-input gradient and continue into the encoder
        offset = self.n * self.n if self.uses_state else 0
        dh = delta[:, offset : offset + self.enc_widths[-1]]
        delta = dh * (1.0 - enc_acts[-1] * enc_acts[-1])
        for idx in range(len(self._enc_layers) - 1, -1, -1):
            w, _ = self._enc_layers[idx]
            gw, gb = grad_layers[idx]
            gw += enc_acts[idx].T @ delta
            gb += delta.sum(axis=0)
            if idx > 0:
                delta = (delta @ w.T) * (1.0 - enc_acts[idx] * enc_acts[idx])

        return loss, grad

    def _grad_views(self, grad: np.ndarray):
        views = []
        offset = 0
        for din, dout in self._shapes:
            gw = grad[offset : offset + din * dout].reshape(din, dout)
            offset += din * dout
            gb = grad[offset : offset + dout]
            offset += dout
            views.append((gw, gb))
        return views

    def layer_param_slices(self) -> list[tuple[str, slice]]:
        """(name, flat-slice) per weight/bias tensor, for per-layer probing."""
        out = []
        offset = 0
        n_enc = len(self._enc_layers)
        for idx, (din, dout) in enumerate(self._shapes):
            group = "enc" if idx < n_enc else "head"
            local = idx if idx < n_enc else idx - n_enc
            out.append((f"{group}{local}.W", slice(offset, offset + din * dout)))
            offset += din * dout
            out.append((f"{group}{local}.b", slice(offset, offset + dout)))
            offset += dout
        return out


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimState:
    """Adam with decoupled weight decay and a cosine learning-rate schedule."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    base_lr: float = 3e-4
    floor_lr: float = 1e-5
    total_steps: int = 1000
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, param_count: int, total_steps: int, **kw) -> "OptimState":
        return cls(
            m=np.zeros(param_count), v=np.zeros(param_count),
            total_steps=max(1, int(total_steps)), **kw,
        )

    def learning_rate(self, step: int | None = None) -> float:
        """Cosine decay from base_lr to floor_lr across total_steps updates."""
        s = self.step if step is None else step
        if self.total_steps <= 1:
            return self.floor_lr
        progress = min(max(s / (self.total_steps - 1), 0.0), 1.0)
        return self.floor_lr + 0.5 * (self.base_lr - self.floor_lr) * (
            1.0 + math.cos(math.pi * progress)
        )


def opt_step(state: OptimState, params: np.ndarray, grad: np.ndarray) -> float:
    """One in-place update of params; returns the learning rate used."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter/gradient/moment shapes disagree")
    lr = state.learning_rate()
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * params)
    return lr


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: VelocityNet, optim: OptimState | None, path, seed=None) -> None:
    """Versioned header plus little-endian float64 arrays; bit-exact round trip."""
    header = {
        "format": "flowperm-checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "net": net.spec(),
        "param_count": net.param_count,
        "has_optimizer": optim is not None,
        "seed": seed,
    }
    if optim is not None:
        header["optimizer"] = {
            "step": optim.step,
            "base_lr": optim.base_lr,
            "floor_lr": optim.floor_lr,
            "total_steps": optim.total_steps,
            "weight_decay": optim.weight_decay,
            "beta1": optim.beta1,
            "beta2": optim.beta2,
            "eps": optim.eps,
        }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(net.params.astype("<f8").tobytes())
        if optim is not None:
            fh.write(optim.m.astype("<f8").tobytes())
            fh.write(optim.v.astype("<f8").tobytes())


def load_checkpoint(path, expect_n: int | None = None):
    """Rebuild (net, optim, header) from a checkpoint file.

    optim is None when the file was saved without optimizer state.  expect_n
    guards against wiring a checkpoint to a dataset of a different size.
    """
    with open(path, "rb") as fh:
        first = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(first.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint file") from exc
    if header.get("format") != "flowperm-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    spec = header["net"]
    if expect_n is not None and spec["n"] != expect_n:
        raise CheckpointError(
            f"{path}: checkpoint is for n = {spec['n']}, expected n = {expect_n}"
        )
    net = VelocityNet(
        n=spec["n"],
        context_dim=spec["context_dim"],
        uses_state=spec["uses_state"],
        uses_time=spec["uses_time"],
        enc_widths=tuple(spec["enc_widths"]),
        head_widths=tuple(spec["head_widths"]),
        init_seed=spec["init_seed"],
    )
    count = header["param_count"]
    if count != net.param_count:
        raise CheckpointError(f"{path}: parameter count mismatch")
    arrays = 3 if header["has_optimizer"] else 1
    expected = count * 8 * arrays
    if len(blob) != expected:
        raise CheckpointError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f8", count=count).astype(np.float64)
    net.set_params(flat)
    optim = None
    if header["has_optimizer"]:
        opt_meta = header["optimizer"]
        m = np.frombuffer(blob, dtype="<f8", count=count, offset=count * 8).copy()
        v = np.frombuffer(blob, dtype="<f8", count=count, offset=count * 16).copy()
        optim = OptimState(
            m=m, v=v, step=opt_meta["step"],
            base_lr=opt_meta["base_lr"], floor_lr=opt_meta["floor_lr"],
            total_steps=opt_meta["total_steps"], weight_decay=opt_meta["weight_decay"],
            beta1=opt_meta["beta1"], beta2=opt_meta["beta2"], eps=opt_meta["eps"],
        )
    return net, optim, header
