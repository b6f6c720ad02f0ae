"""Low-rank neural operator: point-cloud encoder and pointwise decoder.

Encoding (T layers, Monte-Carlo weights w_i = |Omega|/N by default)::

    v_0 = N_0(normalize(f(X)))
    h_t = v_{t-1} + psi_t(X) (phi_t(X)^T (w * v_{t-1}))        t = 1..T-1
    v_t = N_t(LN_t(h_t))
    z   = phi_T(X)^T (w * v_{T-1})                              (R x S)

Decoding: ``u(y) = N_T(psi_T(y) z)``. The quadrature weight is applied to the
latent code as well, so ``z`` stays bounded as N grows.

Conditioning enters the kernel networks only: ``scalar`` appends ``s/scale``
to the kernel input, ``field`` appends the pointwise value ``c(x)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConditionMismatch, ConfigurationError
from .nn import DTYPE, MLP, Jet, LayerNorm, as_tensor, count_params
from .spline_space import NORMALIZE_EPS

CONDITIONINGS = ("none", "scalar", "field")
DECODE_CHUNK = 2048


@dataclass
class LNOConfig:
    S: int = 50
    R: int = 200
    T: int = 7
    d: int = 2
    symmetric: bool = True
    conditioning: str = "none"
    cond_scale: float = 30.0
    embed_layers: Optional[list[int]] = None
    update_layers: Optional[list[int]] = None
    decoder_layers: Optional[list[int]] = None
    kernel_layers: Optional[list[int]] = None
    lower: tuple[float, ...] = (-0.5, -0.5)
    upper: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self):
        S, R = self.S, self.R
        if self.embed_layers is None:
            self.embed_layers = [S, S, S]
        if self.update_layers is None:
            self.update_layers = [S, S]
        if self.decoder_layers is None:
            self.decoder_layers = [S, 10, 1]
        if self.kernel_layers is None:
            self.kernel_layers = [50, 50, 50, R]
        self.lower, self.upper = tuple(self.lower), tuple(self.upper)
        if self.T < 1 or S < 1 or R < 1:
            raise ConfigurationError("need T, S, R >= 1")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigurationError(f"conditioning must be one of {CONDITIONINGS}")
        checks = [(self.embed_layers, S, "embed"), (self.update_layers, S, "update"),
                  (self.decoder_layers, 1, "decoder"), (self.kernel_layers, R, "kernel")]
        for layers, want, name in checks:
            if not layers or layers[-1] != want:
                raise ConfigurationError(f"{name} layers must end in {want}, got {layers}")
        if len(self.lower) != self.d or len(self.upper) != self.d:
            raise ConfigurationError("domain corners must match d")

    @property
    def kernel_in(self) -> int:
        return self.d + (0 if self.conditioning == "none" else 1)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lower"], out["upper"] = list(self.lower), list(self.upper)
        return out


class LNOModel(nn.Module):
    def __init__(self, config: LNOConfig, rng: np.random.Generator | int = 0):
        super().__init__()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        c = self.config = config
        self.embed = MLP(1, c.embed_layers, rng)
        self.updates = nn.ModuleList(MLP(c.S, c.update_layers, rng) for _ in range(c.T - 1))
        self.norms = nn.ModuleList(LayerNorm(c.S) for _ in range(c.T - 1))
        self.decoder = MLP(c.S, c.decoder_layers, rng, linear_output=True)
        self.phi = nn.ModuleList(MLP(c.kernel_in, c.kernel_layers, rng, linear_output=True)
                                 for _ in range(c.T))
        if c.symmetric:
            self.psi = self.phi
        else:
            self.psi = nn.ModuleList(MLP(c.kernel_in, c.kernel_layers, rng, linear_output=True)
                                     for _ in range(c.T))
        self.register_buffer("input_mean", torch.zeros((), dtype=DTYPE))
        self.register_buffer("input_var", torch.ones((), dtype=DTYPE))

    # -- conditioning ---------------------------------------------------

    def _kernel_input(self, pts: Tensor, cond) -> Tensor:
        kind = self.config.conditioning
        if kind == "none":
            if cond is not None:
                raise ConditionMismatch("model takes no conditioning input")
            return pts
        if cond is None:
            raise ConditionMismatch(f"model requires {kind} conditioning")
        cond = as_tensor(cond)
        n = pts.shape[0]
        if kind == "scalar":
            if cond.ndim != 1:
                raise ConditionMismatch("scalar conditioning expects shape (p,)")
            extra = (cond / self.config.cond_scale)[:, None, None].expand(-1, n, 1)
        else:
            if cond.ndim != 2 or cond.shape[1] != n:
                raise ConditionMismatch(f"field conditioning expects shape (p, {n})")
            extra = cond.unsqueeze(-1)
        return torch.cat([pts.expand(extra.shape[0], n, pts.shape[1]), extra], -1)

    def _kernel_jet(self, pts: Tensor, cond) -> Jet:
        kind = self.config.conditioning
        base = Jet.seed(pts)
        if kind == "none":
            if cond is not None:
                raise ConditionMismatch("model takes no conditioning input")
            return base
        if cond is None:
            raise ConditionMismatch(f"model requires {kind} conditioning")
        n, d = pts.shape
        if kind == "scalar":
            s = as_tensor(cond) / self.config.cond_scale
            extra = Jet.const(s[:, None, None].expand(-1, n, 1), d)
        else:
            if not isinstance(cond, tuple) or len(cond) != 3:
                raise ConditionMismatch("field conditioning for derivatives needs (c, grad c, hess-diag c)")
            val, grad, hdiag = (as_tensor(a) for a in cond)
            extra = Jet(val.unsqueeze(-1), grad.unsqueeze(-1), hdiag.unsqueeze(-1))
        return Jet.cat([base, extra])

    def kernel_features(self, t: int, pts, cond=None, which: str = "phi") -> Tensor:
        """``|P| x R`` kernel features of layer ``t`` (1-based); batched when conditioned."""
        if not 1 <= t <= self.config.T:
            raise ValueError(f"layer {t} outside 1..{self.config.T}")
        net = (self.phi if which == "phi" else self.psi)[t - 1]
        return net(self._kernel_input(as_tensor(pts), cond))

    # -- encoder / decoder ----------------------------------------------

    def normalize(self, f: Tensor) -> Tensor:
        return (f - self.input_mean) / torch.sqrt(self.input_var + NORMALIZE_EPS)

    def set_normalization(self, mean: float, var: float) -> None:
        self.input_mean.fill_(mean)
        self.input_var.fill_(var)

    def quadrature(self, n: int, weights=None) -> Tensor:
        if weights is None:
            return torch.full((n, 1), self.config.volume / n, dtype=DTYPE)
        w = as_tensor(weights).reshape(-1, 1)
        if w.shape[0] != n:
            raise ValueError("one quadrature weight per sensor point required")
        return w

    def encode(self, X, f_values, cond=None, weights=None) -> Tensor:
        """Latent code ``z`` of shape ``(p, R, S)`` (``(R, S)`` for 1-D ``f_values``)."""
        X = as_tensor(X)
        f = as_tensor(f_values)
        single = f.ndim == 1
        if single:
            f = f[None]
            if cond is not None and self.config.conditioning != "none":
                cond = as_tensor(cond)[None]
        n = X.shape[0]
        if n == 0:
            raise ValueError("empty sensor cloud")
        if f.shape[-1] != n:
            raise ValueError(f"{f.shape[-1]} function values for {n} sensor points")
        if not torch.isfinite(f).all():
            raise ValueError("non-finite input function values")
        w = self.quadrature(n, weights).unsqueeze(-1)
        inp = self._kernel_input(X, cond)
        # point-major layout (N, p, S): shared kernel features contract in one GEMM
        v = self.embed(self.normalize(f).T.unsqueeze(-1))
        T = self.config.T
        for t in range(1, T):
            phi = self.phi[t - 1](inp)
            psi = phi if self.config.symmetric else self.psi[t - 1](inp)
            h = v + _spread(psi, _gather(phi, w * v))
            v = self.updates[t - 1](self.norms[t - 1](h))
        z = _gather(self.phi[T - 1](inp), w * v)
        return z[0] if single else z

    def decode(self, z, Y, cond=None) -> Tensor:
        z = as_tensor(z)
        Y = as_tensor(Y)
        single = z.ndim == 2
        if single:
            z = z[None]
            if cond is not None and self.config.conditioning != "none":
                cond = as_tensor(cond)[None]
        if z.shape[-2:] != (self.config.R, self.config.S):
            raise ValueError(f"latent code shape {tuple(z.shape)} incompatible with R={self.config.R}, S={self.config.S}")
        if Y.shape[0] <= DECODE_CHUNK:
            u = self._decode_block(z, Y, cond)
        else:
            # fixed-size blocks keep intermediates cache-resident, so cost stays linear in M
            parts = []
            for lo in range(0, Y.shape[0], DECODE_CHUNK):
                c = cond
                if cond is not None and self.config.conditioning == "field":
                    c = as_tensor(cond)[:, lo:lo + DECODE_CHUNK]
                parts.append(self._decode_block(z, Y[lo:lo + DECODE_CHUNK], c))
            u = torch.cat(parts, -1)
        return u[0] if single else u

    def _decode_block(self, z: Tensor, Y: Tensor, cond) -> Tensor:
        feats = self.psi[-1](self._kernel_input(Y, cond))
        return self.decoder(_spread(feats, z))[..., 0].T

    def decode_jet(self, z: Tensor, Y, cond=None) -> tuple[Tensor, Tensor, Tensor]:
        """Decoded values ``(p, M)``, gradients ``(p, M, d)`` and Laplacians ``(p, M)``."""
        Y = as_tensor(Y)
        feats = self.psi[-1].jet(self._kernel_jet(Y, cond))
        return self.decoder.jet(feats.matmul(z)).feature(0)

    def predict(self, X, f_values, Y, cond_X=None, cond_Y=None, weights=None) -> Tensor:
        return self.decode(self.encode(X, f_values, cond_X, weights), Y, cond_Y)

    def param_count(self) -> int:
        return count_params(self)


def _gather(phi: Tensor, wv: Tensor) -> Tensor:
    """``phi^T wv`` per instance: ``(N, R)`` or ``(p, N, R)`` with ``(N, p, S)`` -> ``(p, R, S)``."""
    N, p, S = wv.shape
    if phi.ndim == 2:
        return (phi.T @ wv.reshape(N, p * S)).reshape(-1, p, S).transpose(0, 1)
    return torch.einsum("pnr,nps->prs", phi, wv)


def _spread(psi: Tensor, z: Tensor) -> Tensor:
    """``psi z`` per instance in point-major layout ``(N, p, S)``."""
    p, R, S = z.shape
    if psi.ndim == 2:
        return (psi @ z.transpose(0, 1).reshape(R, p * S)).reshape(-1, p, S)
    return torch.einsum("pnr,prs->nps", psi, z)


def poisson_full_config() -> LNOConfig:
    """Full-size Poisson architecture (S=50, R=200, T=7, symmetric kernel)."""
    return LNOConfig(S=50, R=200, T=7, symmetric=True, kernel_layers=[50, 50, 50, 200])


def fitting_full_config() -> LNOConfig:
    return LNOConfig(S=50, R=100, T=4, symmetric=True, kernel_layers=[50, 50, 100])
