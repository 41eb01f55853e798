"""Differentiable array layer.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd. What lives here is the small set of primitives the models are
built from (causal/strided convolution, causal transposed convolution, a
unidirectional LSTM, SnakeBeta), finiteness guards, the parameter registry with
freeze support, and a central-difference gradient checker that is independent
of autograd.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.1


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient contains NaN or Inf."""


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# precision / determinism


@contextlib.contextmanager
def precision(mode: str = "float64"):
    """Temporarily switch the default dtype ("float64" verification, "float32" training)."""
    dtype = {"float64": torch.float64, "float32": torch.float32}[mode]
    prev = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(prev)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).nonzero()[0].tolist()
        raise NonFiniteError(f"non-finite value in {what} at index {bad}")
    return x


def check_finite_grads(params: Iterable[tuple[str, torch.Tensor]]) -> None:
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for {name}")


# ---------------------------------------------------------------------------
# primitives


def conv_out_len(T: int, K: int, stride: int = 1, dilation: int = 1,
                 left_pad: int = 0, right_pad: int = 0) -> int:
    return (T + left_pad + right_pad - dilation * (K - 1) - 1) // stride + 1


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, dilation: int = 1, left_pad: int = 0, right_pad: int = 0) -> torch.Tensor:
    """1-D convolution with explicit asymmetric zero padding.

    ``x`` is ``[C_in, T]`` or ``[B, C_in, T]``; ``weight`` is ``[C_out, C_in, K]``.
    Causal mode is ``left_pad = dilation * (K - 1), right_pad = 0``.
    """
    if stride < 1 or dilation < 1 or weight.shape[-1] < 1:
        raise ShapeError("stride, dilation and kernel size must be >= 1")
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    check_finite(x, "conv1d input")
    if left_pad or right_pad:
        x = F.pad(x, (left_pad, right_pad))
    if x.shape[-1] < dilation * (weight.shape[-1] - 1) + 1:
        raise ShapeError("conv1d: input shorter than the dilated kernel")
    y = F.conv1d(x, weight, bias, stride=stride, dilation=dilation)
    return y[0] if unbatched else y


def conv_transpose1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1, causal_trim: int | None = None) -> torch.Tensor:
    """Transposed convolution trimmed to exactly ``T * stride`` output samples.

    ``weight`` is ``[C_in, C_out, K]``. Input frame ``t`` writes output samples
    ``t*stride .. t*stride + K - 1``; the tail past ``T*stride`` is dropped, so the
    op never looks ahead at the output rate. ``causal_trim`` defaults to
    ``K - stride`` (the dropped tail length).
    """
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose1d: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    check_finite(x, "conv_transpose1d input")
    T = x.shape[-1]
    K = weight.shape[-1]
    y = F.conv_transpose1d(x, weight, bias, stride=stride)
    full = (T - 1) * stride + K
    trim = K - stride if causal_trim is None else causal_trim
    if full - trim < T * stride:
        y = F.pad(y, (0, T * stride - (full - trim)))
    y = y[..., : T * stride]
    return y[0] if unbatched else y


def snake_beta(x: torch.Tensor, log_alpha: torch.Tensor, log_beta: torch.Tensor,
               eps: float = 1e-9) -> torch.Tensor:
    """``x + 1/beta * sin(alpha * x)**2`` with per-channel log-domain alpha, beta.

    ``x`` is ``[..., C, T]``; ``log_alpha`` and ``log_beta`` are ``[C]``.
    """
    alpha = log_alpha.exp().unsqueeze(-1)
    beta = log_beta.exp().unsqueeze(-1)
    return x + torch.sin(alpha * x).pow(2) / (beta + eps)


def lstm_forward(x: torch.Tensor, params: Sequence[dict[str, torch.Tensor]]) -> torch.Tensor:
    """Unidirectional multi-layer LSTM with explicit gates and zero initial state.

    ``x`` is ``[T, D]`` or ``[B, T, D]``. ``params[l]`` holds ``weight_ih [4H, D_l]``,
    ``weight_hh [4H, H]``, ``bias_ih [4H]`` and ``bias_hh [4H]`` in torch gate order
    (input, forget, cell, output), so it is interchangeable with ``nn.LSTM``.
    """
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    B, T, _ = x.shape
    h_seq = x
    for layer in params:
        H = layer["weight_hh"].shape[1]
        h = x.new_zeros(B, H)
        c = x.new_zeros(B, H)
        xw = h_seq @ layer["weight_ih"].T + layer["bias_ih"] + layer["bias_hh"]
        outs = []
        for t in range(T):
            gates = xw[:, t] + h @ layer["weight_hh"].T
            i, f, g, o = gates.chunk(4, dim=-1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            outs.append(h)
        h_seq = torch.stack(outs, dim=1)
        check_finite(h_seq, "LSTM state")
    return h_seq[0] if unbatched else h_seq


# ---------------------------------------------------------------------------
# modules


class CausalConv1d(nn.Module):
    """Convolution that sees no input past its own output frame.

    Unstrided layers pad ``dilation*(K-1)`` on the left. Strided layers pad
    ``K - stride`` so output frame ``t`` covers input ``[t*s - (K-s), t*s + s - 1]``,
    i.e. everything up to the end of its own block. ``lookahead`` adds right
    context (in input frames) and is the only way to make the layer non-causal.
    """

    causal = True

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 dilation: int = 1, lookahead: int = 0, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, dilation=dilation, bias=bias)
        self.stride = stride
        self.dilation = dilation
        self.lookahead = lookahead
        span = dilation * (kernel - 1)
        if stride > 1:
            if kernel < stride:
                raise ShapeError("strided causal conv needs kernel >= stride")
            self.left_pad, self.right_pad = kernel - stride, 0
        else:
            self.left_pad, self.right_pad = span - lookahead, lookahead
        if self.left_pad < 0:
            raise ShapeError("lookahead exceeds the kernel span")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv1d(x, self.conv.weight, self.conv.bias, self.stride, self.dilation,
                      self.left_pad, self.right_pad)


class CausalConvTranspose1d(nn.Module):
    causal = True
    lookahead = 0

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int):
        super().__init__()
        if kernel < stride:
            raise ShapeError("transposed conv needs kernel >= stride")
        self.conv = nn.ConvTranspose1d(c_in, c_out, kernel, stride=stride)
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv_transpose1d(x, self.conv.weight, self.conv.bias, self.stride)


class SnakeBeta(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.zeros(channels))
        self.log_beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return snake_beta(x, self.log_alpha, self.log_beta)


class LSTM(nn.Module):
    """Batch-first unidirectional LSTM (``nn.LSTM`` kernel, same math as :func:`lstm_forward`)."""

    causal = True
    lookahead = 0

    def __init__(self, d_in: int, hidden: int, layers: int):
        super().__init__()
        self.lstm = nn.LSTM(d_in, hidden, num_layers=layers, batch_first=True)

    def layer_params(self) -> list[dict[str, torch.Tensor]]:
        return [
            {k: getattr(self.lstm, f"{k}_l{i}") for k in ("weight_ih", "weight_hh", "bias_ih", "bias_hh")}
            for i in range(self.lstm.num_layers)
        ]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, _ = self.lstm(x)
        return check_finite(y, "LSTM state")


# ---------------------------------------------------------------------------
# parameter registry


class ParameterSet:
    """Dotted-name view over a module's parameters with prefix-based freezing."""

    def __init__(self, module: nn.Module, frozen: Iterable[str] = ()):
        self.module = module
        self.params: dict[str, nn.Parameter] = dict(module.named_parameters())
        self.frozen: set[str] = set()
        for prefix in frozen:
            self.freeze(prefix)

    def freeze(self, prefix: str) -> None:
        self.frozen.add(prefix)

    def unfreeze(self, prefix: str) -> None:
        self.frozen.discard(prefix)

    def is_frozen(self, name: str) -> bool:
        return any(name == p or name.startswith(p.rstrip(".") + ".") for p in self.frozen)

    def trainable(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.params.items() if not self.is_frozen(n)]

    def __iter__(self) -> Iterator[tuple[str, nn.Parameter]]:
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def digest(self, prefix: str = "") -> str:
        return param_digest(self.module, prefix)


def param_digest(module: nn.Module, prefix: str = "") -> str:
    """SHA-256 over the raw bytes of every parameter/buffer whose name starts with ``prefix``."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class CheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    def __str__(self) -> str:
        lines = [f"gradient check tol={self.tol:g} worst={self.worst:.3e} -> {'PASS' if self.passed else 'FAIL'}"]
        for k, v in self.max_rel_error.items():
            lines.append(f"  {k:<50s} {v:.3e} ({self.n_checked[k]} entries)")
        return "\n".join(lines)


def gradient_check(f: Callable[[], torch.Tensor], inputs: dict[str, torch.Tensor] | Sequence[torch.Tensor],
                   step: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None,
                   floor: float = 1e-6, generator: torch.Generator | None = None) -> CheckReport:
    """Compare autograd gradients of the scalar ``f()`` with central differences.

    ``inputs`` are leaf tensors (``requires_grad=True``) that ``f`` closes over;
    they are perturbed in place. ``max_entries`` caps how many coordinates per
    tensor are probed (chosen at random). The relative error per coordinate is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor * max(1, |f(x)|))``; scaling the
    floor with ``|f|`` keeps the check invariant to a constant loss weight.
    """
    if not isinstance(inputs, dict):
        inputs = {f"input{i}": t for i, t in enumerate(inputs)}
    for name, t in inputs.items():
        if t.dtype != torch.float64:
            raise TypeError(f"gradient_check needs float64 tensors ({name} is {t.dtype})")
        t.grad = None
    out = f()
    if out.numel() != 1:
        raise ShapeError("gradient_check needs a scalar function")
    grads = torch.autograd.grad(out, list(inputs.values()), allow_unused=True)
    floor = floor * max(1.0, abs(out.item()))
    report = CheckReport(tol=tol)
    gen = generator or torch.Generator().manual_seed(0)
    with torch.no_grad():
        for (name, t), g in zip(inputs.items(), grads):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
            else:
                idx = range(n)
            worst = 0.0
            count = 0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = g.view(-1)[i].item()
                if not (math.isfinite(num) and math.isfinite(ana)):
                    raise NonFiniteError(f"non-finite gradient for {name}[{i}]")
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
                count += 1
            report.max_rel_error[name] = worst
            report.n_checked[name] = count
    return report


def module_gradient_check(loss_fn: Callable[[], torch.Tensor], module: nn.Module, **kw) -> CheckReport:
    """:func:`gradient_check` over every trainable parameter of ``module``."""
    params = {n: p for n, p in module.named_parameters() if p.requires_grad}
    return gradient_check(loss_fn, params, **kw)
