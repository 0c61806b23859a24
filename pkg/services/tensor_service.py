from typing import Callable, List, Optional, Sequence

import numpy as np

from models.errors import InvalidInputError, ShapeMismatchError
from models.tensor import Tape, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _emit(value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording it on the active tape when gradients are needed."""
    tape = Tape.active()
    out = Tensor(value)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class RunningStats:
    """Batch-norm running mean / variance, updated in place during training."""

    def __init__(self, mean: np.ndarray, var: np.ndarray):
        self.mean = mean
        self.var = var


class TensorService:
    # --- Structural ops ---
    @staticmethod
    def reshape(x: Tensor, shape) -> Tensor:
        src = x.shape
        return _emit(x.data.reshape(shape), [x], lambda g: [g.reshape(src)])

    @staticmethod
    def concat_last(xs: Sequence[Tensor]) -> Tensor:
        xs = [_as_tensor(x) for x in xs]
        if not xs:
            raise InvalidInputError("concat_last needs at least one tensor")
        lead = xs[0].shape[:-1]
        for x in xs[1:]:
            if x.shape[:-1] != lead:
                raise ShapeMismatchError(f"cannot concatenate {xs[0].shape} with {x.shape}")
        widths = [x.shape[-1] for x in xs]
        bounds = np.cumsum([0] + widths)

        def backward(g):
            return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs))]

        return _emit(np.concatenate([x.data for x in xs], axis=-1), xs, backward)

    @staticmethod
    def slice_range(x: Tensor, start: int, stop: int) -> Tensor:
        def backward(g):
            full = np.zeros_like(x.data)
            full[..., start:stop] = g
            return [full]

        return _emit(x.data[..., start:stop], [x], backward)

    @staticmethod
    def slice_last(x: Tensor, parts: int) -> List[Tensor]:
        width = x.shape[-1]
        if parts < 1 or width % parts:
            raise ShapeMismatchError(f"last extent {width} is not divisible into {parts} parts")
        step = width // parts
        return [TensorService.slice_range(x, i * step, (i + 1) * step) for i in range(parts)]

    @staticmethod
    def pad_last(x: Tensor, width: int) -> Tensor:
        """Zero-pad the last axis up to `width`."""
        extra = width - x.shape[-1]
        if extra < 0:
            raise ShapeMismatchError(f"cannot pad width {x.shape[-1]} down to {width}")
        if extra == 0:
            return x
        zeros = Tensor(np.zeros(x.shape[:-1] + (extra,), dtype=x.dtype))
        return TensorService.concat_last([x, zeros])

    @staticmethod
    def gather_rows(x: Tensor, index) -> Tensor:
        """x[index] along the first axis; result shape index.shape + x.shape[1:]."""
        idx = np.asarray(index, dtype=np.int64)

        def backward(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
            return [full]

        return _emit(x.data[idx], [x], backward)

    # --- Elementwise ops ---
    @staticmethod
    def add(a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"add expects equal shapes, got {a.shape} and {b.shape}")
        return _emit(a.data + b.data, [a, b], lambda g: [g, g])

    @staticmethod
    def sub(a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"sub expects equal shapes, got {a.shape} and {b.shape}")
        return _emit(a.data - b.data, [a, b], lambda g: [g, -g])

    @staticmethod
    def mul(a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"mul expects equal shapes, got {a.shape} and {b.shape}")
        return _emit(a.data * b.data, [a, b], lambda g: [g * b.data, g * a.data])

    @staticmethod
    def scale_neighbors(g: Tensor, alpha: Tensor) -> Tensor:
        """g[M, K, C] * alpha[M, C], alpha broadcast over the neighbor axis."""
        if g.data.ndim != 3 or alpha.shape != (g.shape[0], g.shape[2]):
            raise ShapeMismatchError(f"cannot scale {g.shape} by {alpha.shape}")
        a = alpha.data[:, None, :]
        return _emit(g.data * a, [g, alpha], lambda grad: [grad * a, (grad * g.data).sum(axis=1)])

    @staticmethod
    def sum(x: Tensor) -> Tensor:
        return _emit(np.asarray(x.data.sum()), [x], lambda g: [np.full_like(x.data, g)])

    @staticmethod
    def sigmoid(x: Tensor) -> Tensor:
        y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return _emit(y, [x], lambda g: [g * y * (1.0 - y)])

    @staticmethod
    def relu(x: Tensor) -> Tensor:
        mask = x.data > 0
        return _emit(np.where(mask, x.data, 0).astype(x.dtype), [x], lambda g: [g * mask])

    @staticmethod
    def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
        if not training or p <= 0.0:
            return x
        keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
        return _emit(x.data * keep, [x], lambda g: [g * keep])

    # --- Layers ---
    @staticmethod
    def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        """Affine map along the last axis: x @ W^T + b, W is [out, in]."""
        if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
            raise ShapeMismatchError(f"linear: input {x.shape} does not match weight {weight.shape}")
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        y = x.data @ weight.data.T
        if bias is not None:
            y = y + bias.data
        inputs = [x, weight] + ([bias] if bias is not None else [])

        def backward(g):
            g2 = g.reshape(-1, weight.shape[0])
            x2 = x.data.reshape(-1, weight.shape[1])
            grads = [g @ weight.data, g2.T @ x2]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return grads

        return _emit(y, inputs, backward)

    @staticmethod
    def batch_norm(x: Tensor, stats: RunningStats, gamma: Tensor, beta: Tensor, training: bool,
                   eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
        """Normalize each channel (last axis) over all leading axes."""
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeMismatchError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
        x2 = x.data.reshape(-1, c)
        n = x2.shape[0]

        if training:
            if n < 2:
                raise InvalidInputError("batch_norm in train mode needs at least 2 rows")
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            stats.mean[...] = (1.0 - momentum) * stats.mean + momentum * mean
            stats.var[...] = (1.0 - momentum) * stats.var + momentum * var * (n / (n - 1))
        else:
            mean, var = stats.mean, stats.var

        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x2 - mean) * inv
        y = (xhat * gamma.data + beta.data).astype(x.dtype).reshape(x.shape)

        def backward(g):
            g2 = g.reshape(-1, c)
            dgamma = (g2 * xhat).sum(axis=0)
            dbeta = g2.sum(axis=0)
            dxhat = g2 * gamma.data
            if training:
                dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dx = dxhat * inv
            return [dx.reshape(x.shape), dgamma, dbeta]

        return _emit(y, [x, gamma, beta], backward)

    @staticmethod
    def max_over_neighbors(g: Tensor) -> Tensor:
        """Entrywise max over axis 1 of [M, K, C]; ties route to the lowest k."""
        if g.data.ndim != 3 or g.shape[1] < 1:
            raise ShapeMismatchError(f"max_over_neighbors expects [M, K>=1, C], got {g.shape}")
        arg = np.argmax(g.data, axis=1)[:, None, :]
        out = np.take_along_axis(g.data, arg, axis=1)[:, 0, :]

        def backward(grad):
            full = np.zeros_like(g.data)
            np.put_along_axis(full, arg, grad[:, None, :], axis=1)
            return [full]

        return _emit(out, [g], backward)

    # --- Loss ---
    @staticmethod
    def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
        """Mean cross-entropy against label-smoothed one-hot targets."""
        y = np.asarray(labels, dtype=np.int64)
        b, c = logits.shape
        target = np.full((b, c), smoothing / c, dtype=np.float64)
        target[np.arange(b), y] += 1.0 - smoothing
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(target * log_p).sum() / b

        def backward(g):
            return [(g * (np.exp(log_p) - target) / b).astype(logits.dtype)]

        return _emit(np.asarray(loss, dtype=logits.dtype), [logits], backward)

    # --- Verification ---
    @staticmethod
    def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, floor: float = 1e-8) -> float:
        """
        Max relative error between reverse-mode and central-difference gradients
        of the scalar function fn at x (denominator max(|a|, |b|, floor)).
        """
        if step <= 0:
            raise InvalidInputError("grad_check step must be > 0")
        probe = Tensor(x.data.copy(), requires_grad=True)
        with Tape() as tape:
            out = fn(probe)
        if out.data.size != 1:
            raise ShapeMismatchError(f"grad_check needs a scalar function, got shape {out.shape}")
        if out.requires_grad:
            tape.backward(out)
        analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

        numeric = np.zeros_like(probe.data)
        flat = probe.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = float(fn(probe).data)
            flat[i] = orig - step
            minus = float(fn(probe).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)

        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        return float(np.max(np.abs(analytic - numeric) / denom))
