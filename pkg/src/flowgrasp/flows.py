"""Invertible conditional layers and their composition into Glow-style stacks.

Each stack is a diffeomorphism on R^d built from K blocks of
actnorm -> invertible linear -> affine coupling (in the scoring direction,
data to base). Log-probabilities are exact: base log-density plus the sum
of per-layer log-determinants. Context, when present, enters through the
coupling conditioners and optionally through a conditional base.
"""

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .errors import ContractError, DataError, NumericError
from .numerics import DTYPE, ContextMLP, check_finite

LOG_SCALE_CLAMP = 5.0   # bound on coupling log-scales, keeps likelihoods bounded
LOG_STD_CLAMP = 7.0     # bound on conditional-base log-stds


class Actnorm(nn.Module):
    """Per-dimension affine layer with data-dependent initialization."""

    def __init__(self, dim: int, identity_init: bool = False):
        super().__init__()
        self.dim = dim
        self.shift = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("initialized", torch.tensor(identity_init))

    def initialize_from(self, batch: torch.Tensor) -> None:
        if batch.shape[0] < 16:
            raise ContractError("actnorm init needs a batch of >= 16")
        std, mean = torch.std_mean(batch, dim=0, unbiased=False)
        if (std < 1e-12).any():
            raise DataError("degenerate actnorm init batch (zero variance)")
        with torch.no_grad():
            self.shift.copy_(mean)
            self.log_scale.copy_(torch.log(std))
        self.initialized.fill_(True)

    def normalize(self, y, context=None):
        u = (y - self.shift) * torch.exp(-self.log_scale)
        return u, -self.log_scale.sum().expand(y.shape[0])

    def generate(self, u, context=None):
        y = u * torch.exp(self.log_scale) + self.shift
        return y, self.log_scale.sum().expand(u.shape[0])


class InvertibleLinear(nn.Module):
    """Dense invertible map W = P L U with an LU-parameterized log-det.

    P is a frozen permutation, L unit-lower-triangular, U upper-triangular
    with a log-parameterized diagonal, so log|det W| = sum(log_diag) exactly.
    """

    def __init__(self, dim: int, identity_init: bool = False):
        super().__init__()
        self.dim = dim
        if identity_init:
            w = torch.eye(dim, dtype=DTYPE)
        else:
            w, _ = torch.linalg.qr(torch.randn(dim, dim, dtype=DTYPE))
        p, lower, upper = torch.linalg.lu(w)
        diag = torch.diagonal(upper)
        self.register_buffer("perm", p)
        self.register_buffer("sign_diag", torch.sign(diag))
        self.lower = nn.Parameter(lower.tril(-1))
        self.upper = nn.Parameter(upper.triu(1))
        self.log_diag = nn.Parameter(torch.log(torch.abs(diag)))
        self.register_buffer("eye", torch.eye(dim, dtype=DTYPE))
        self.register_buffer("lmask", torch.tril(torch.ones(dim, dim, dtype=DTYPE), -1))

    def _weight(self) -> torch.Tensor:
        lower = self.lower * self.lmask + self.eye
        upper = self.upper * self.lmask.T + torch.diag(self.sign_diag * torch.exp(self.log_diag))
        return self.perm @ lower @ upper

    def normalize(self, y, context=None):
        u = torch.linalg.solve(self._weight(), y.T).T
        return u, -self.log_diag.sum().expand(y.shape[0])

    def generate(self, u, context=None):
        y = u @ self._weight().T
        return y, self.log_diag.sum().expand(u.shape[0])


class AffineCoupling(nn.Module):
    """Affine coupling with an MLP conditioner on (identity half, context).

    `swap` flips which half passes through unchanged, so alternating layers
    transform every coordinate. Log-scales are smoothly clamped to
    (-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP).
    """

    def __init__(self, dim: int, context_dim: int, hidden: int = 64,
                 n_hidden_layers: int = 3, swap: bool = False):
        super().__init__()
        if dim < 2:
            raise ContractError("coupling needs dim >= 2")
        self.dim = dim
        self.swap = swap
        self.d1 = dim // 2
        d2 = dim - self.d1
        if swap:
            self.d1, d2 = d2, self.d1
        dims = [self.d1] + [hidden] * n_hidden_layers + [2 * d2]
        self.conditioner = ContextMLP(dims, context_dim=context_dim,
                                      activation="relu", zero_init_last=True)

    def _split(self, v):
        if self.swap:
            return v[:, self.dim - self.d1:], v[:, :self.dim - self.d1]
        return v[:, :self.d1], v[:, self.d1:]

    def _join(self, a, b):
        if self.swap:
            return torch.cat([b, a], dim=1)
        return torch.cat([a, b], dim=1)

    def _params(self, ident, context):
        out = self.conditioner(ident, context if self.conditioner.context_dim > 0 else None)
        raw_s, t = out.chunk(2, dim=1)
        s = LOG_SCALE_CLAMP * torch.tanh(raw_s / LOG_SCALE_CLAMP)
        return s, t

    def normalize(self, y, context=None):
        ident, active = self._split(y)
        s, t = self._params(ident, context)
        u2 = (active - t) * torch.exp(-s)
        return self._join(ident, u2), -s.sum(dim=1)

    def generate(self, u, context=None):
        ident, active = self._split(u)
        s, t = self._params(ident, context)
        y2 = active * torch.exp(s) + t
        return self._join(ident, y2), s.sum(dim=1)


class StandardNormalBase(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def log_prob(self, u, context=None, logstd_offset=None):
        if logstd_offset is None:
            return (-0.5 * self.dim * math.log(2 * math.pi)
                    - 0.5 * (u ** 2).sum(dim=1))
        s = logstd_offset.reshape(-1, 1)
        z = u * torch.exp(-s)
        return (-0.5 * self.dim * math.log(2 * math.pi)
                - self.dim * s.squeeze(1) - 0.5 * (z ** 2).sum(dim=1))

    def sample(self, n, context=None, generator=None, logstd_offset=None):
        u = torch.randn(n, self.dim, dtype=DTYPE, generator=generator)
        if logstd_offset is not None:
            u = u * torch.exp(logstd_offset.reshape(-1, 1))
        return u, self.log_prob(u, logstd_offset=logstd_offset)


class ConditionalNormalBase(nn.Module):
    """Factorized Gaussian whose mean/log-std are predicted from the context."""

    def __init__(self, dim: int, context_dim: int, hidden: int = 64):
        super().__init__()
        if context_dim <= 0:
            raise ContractError("conditional base needs a context")
        self.dim = dim
        self.net = ContextMLP([context_dim, hidden, hidden, 2 * dim],
                              activation="relu", zero_init_last=True)

    def _stats(self, context):
        mean, log_std = self.net(context).chunk(2, dim=1)
        return mean, torch.clamp(log_std, -LOG_STD_CLAMP, LOG_STD_CLAMP)

    def log_prob(self, u, context=None, logstd_offset=None):
        if context is None:
            raise ContractError("conditional base requires a context")
        mean, log_std = self._stats(context)
        if logstd_offset is not None:
            log_std = log_std + logstd_offset.reshape(-1, 1)
        z = (u - mean) * torch.exp(-log_std)
        return (-0.5 * self.dim * math.log(2 * math.pi)
                - log_std.sum(dim=1) - 0.5 * (z ** 2).sum(dim=1))

    def sample(self, n, context=None, generator=None, logstd_offset=None):
        if context is None:
            raise ContractError("conditional base requires a context")
        if context.shape[0] != n:
            raise ContractError("context batch must match sample count")
        mean, log_std = self._stats(context)
        if logstd_offset is not None:
            log_std = log_std + logstd_offset.reshape(-1, 1)
        eps = torch.randn(n, self.dim, dtype=DTYPE, generator=generator)
        u = mean + eps * torch.exp(log_std)
        return u, self.log_prob(u, context, logstd_offset=logstd_offset)


class FlowStack(nn.Module):
    """K blocks of actnorm -> invertible linear -> affine coupling over R^d.

    The scoring direction (data to base) applies the layers in that order;
    sampling applies the exact inverses in reverse. `conditional_base=True`
    additionally conditions the base distribution on the context.
    """

    def __init__(self, dim: int, context_dim: int = 0, blocks: int = 8,
                 hidden: int = 64, conditional_base: bool = False,
                 identity_init: bool = False):
        super().__init__()
        if blocks < 1:
            raise ContractError("need at least one block")
        self.dim = dim
        self.context_dim = context_dim
        self.blocks = blocks
        layers = []
        for k in range(blocks):
            layers.append(Actnorm(dim, identity_init=identity_init))
            layers.append(InvertibleLinear(dim, identity_init=identity_init))
            layers.append(AffineCoupling(dim, context_dim, hidden=hidden,
                                         swap=bool(k % 2)))
        self.layers = nn.ModuleList(layers)
        if conditional_base:
            self.base = ConditionalNormalBase(dim, context_dim, hidden=hidden)
        else:
            self.base = StandardNormalBase(dim)

    @property
    def initialized(self) -> bool:
        return all(l.initialized for l in self.layers if isinstance(l, Actnorm))

    def _check(self, x, context):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ContractError(f"expected (B, {self.dim}) inputs")
        check_finite(x, "flow input")
        if self.context_dim > 0:
            if context is None:
                raise ContractError("this flow requires a context")
            if context.ndim != 2 or context.shape[1] != self.context_dim:
                raise ContractError(f"expected (B, {self.context_dim}) context")
            if context.shape[0] != x.shape[0]:
                raise ContractError("context batch must match input batch")
            check_finite(context, "flow context")
        elif context is not None:
            raise ContractError("context given to an unconditional flow")
        if not self.initialized:
            raise ContractError("actnorm layers are not initialized")

    def inverse_flow(self, x: torch.Tensor, context: Optional[torch.Tensor] = None
                     ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Data -> base. Returns (u, log|det J_{T^-1}(x)|)."""
        self._check(x, context)
        logdet = torch.zeros(x.shape[0], dtype=DTYPE)
        for layer in self.layers:
            x, ld = layer.normalize(x, context)
            logdet = logdet + ld
        return x, logdet

    def forward_flow(self, u: torch.Tensor, context: Optional[torch.Tensor] = None
                     ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Base -> data. Returns (x, log|det J_T(u)|)."""
        self._check(u, context)
        logdet = torch.zeros(u.shape[0], dtype=DTYPE)
        for layer in reversed(self.layers):
            u, ld = layer.generate(u, context)
            logdet = logdet + ld
        return u, logdet

    def log_prob(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                 base_logstd_offset: Optional[torch.Tensor] = None
                 ) -> torch.Tensor:
        u, logdet_inv = self.inverse_flow(x, context)
        lp = self.base.log_prob(u, context,
                                logstd_offset=base_logstd_offset) + logdet_inv
        return check_finite(lp, "flow log_prob")

    def sample(self, n: int, context: Optional[torch.Tensor] = None,
               generator: Optional[torch.Generator] = None,
               base_logstd_offset: Optional[torch.Tensor] = None
               ) -> Tuple[torch.Tensor, torch.Tensor]:
        """n base draws pushed through the flow, with their exact log-probs."""
        if n < 1:
            raise ContractError("n must be >= 1")
        u, base_lp = self.base.sample(n, context, generator,
                                      logstd_offset=base_logstd_offset)
        x, logdet = self.forward_flow(u, context)
        return check_finite(x, "flow samples"), base_lp - logdet

    def init_actnorm(self, batch: torch.Tensor,
                     context: Optional[torch.Tensor] = None) -> None:
        """Data-dependent init: each actnorm output is zero-mean/unit-var on
        this batch (in the scoring direction)."""
        if batch.shape[0] < 16:
            raise ContractError("actnorm init needs a batch of >= 16")
        with torch.no_grad():
            x = batch
            for layer in self.layers:
                if isinstance(layer, Actnorm) and not layer.initialized:
                    layer.initialize_from(x)
                x, _ = layer.normalize(x, context)
