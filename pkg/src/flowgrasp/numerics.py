"""Small differentiable building blocks shared by all models.

Everything runs in float64 on CPU: the networks are tiny and the
exact-likelihood checks (log-det vs numerical Jacobian, grid integration)
need the headroom.
"""

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import ContractError, NumericError

DTYPE = torch.float64


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    """Reject NaN/Inf instead of letting it propagate."""
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}", term=what)
    return t


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def positional_encoding(v: torch.Tensor, bands: int) -> torch.Tensor:
    """Fourier features [v, sin(2^k pi v), cos(2^k pi v)] for k < bands.

    Output size is (2*bands + 1) * v.shape[-1]; bands = 0 returns v unchanged.
    """
    if bands < 0:
        raise ContractError("bands must be >= 0")
    check_finite(v, "positional_encoding input")
    if bands == 0:
        return v
    parts = [v]
    for k in range(bands):
        w = (2.0 ** k) * math.pi
        parts.append(torch.sin(w * v))
        parts.append(torch.cos(w * v))
    return torch.cat(parts, dim=-1)


_ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh}


class ContextMLP(nn.Module):
    """Dense MLP with an optional context vector concatenated to the input.

    `dims` lists the layer widths including input and output,
    e.g. [in, h1, h2, out]. The context, when present, is appended to the
    input of the first layer only. No activation after the last layer.
    """

    def __init__(self, dims: Sequence[int], context_dim: int = 0,
                 activation: str = "relu", zero_init_last: bool = False):
        super().__init__()
        if len(dims) < 2:
            raise ContractError("ContextMLP needs at least one layer")
        if activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.input_dim = dims[0]
        self.context_dim = context_dim
        self.output_dim = dims[-1]
        self.activation = activation
        layers = []
        prev = dims[0] + context_dim
        for width in dims[1:]:
            layers.append(nn.Linear(prev, width, dtype=DTYPE))
            prev = width
        self.layers = nn.ModuleList(layers)
        if zero_init_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ContractError(
                f"input has {x.shape[-1]} features, expected {self.input_dim}")
        check_finite(x, "mlp input")
        if self.context_dim > 0:
            if context is None or context.shape[-1] != self.context_dim:
                got = None if context is None else context.shape[-1]
                raise ContractError(
                    f"context has {got} features, expected {self.context_dim}")
            check_finite(context, "mlp context")
            x = torch.cat([x, context], dim=-1)
        elif context is not None:
            raise ContractError("context given to a context-free MLP")
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = act(x)
        return check_finite(x, "mlp output")


def make_adamw(params, lr: float, weight_decay: float = 1e-4) -> torch.optim.AdamW:
    """Decoupled-weight-decay Adam, the optimizer used by every training loop."""
    if lr <= 0:
        raise ContractError("lr must be > 0")
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def finite_difference_grads(fn, params: Sequence[torch.Tensor],
                            h: float = 1e-5) -> list:
    """Central finite differences of a scalar-valued fn w.r.t. each tensor.

    Independent of autograd on purpose: this is the oracle the analytic
    gradients are checked against.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(fn())
                flat[i] = orig - h
                f_minus = float(fn())
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * h)
            grads.append(g)
    return grads
