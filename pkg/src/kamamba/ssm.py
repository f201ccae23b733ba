"""State-space sequence operators.

Two layers live here:

* a plain (non-selective) linear SSM with zero-order-hold discretization and two
  execution paths, a left-to-right recurrence (:func:`scan`) and a causal
  convolution with the materialized kernel (:func:`kernel_apply`);
* the selective (input-dependent Δ, B, C) Mamba-style block used by the sparse
  stages, backed by a memory-lean custom autograd scan.

The state matrix is always diagonal: ``A`` is stored as its N diagonal entries,
so ``exp(ΔA)`` is element-wise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import TrainingFault

# below this |ΔA| the ZOH input factor switches to its series form
ZOH_SMALL = 1e-6


def _as_tensor(name, value, ndim=None, dtype=torch.float64):
    t = torch.as_tensor(value, dtype=dtype)
    if ndim is not None and t.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-D, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name}: contains non-finite values")
    return t


@dataclass(frozen=True)
class SsmParams:
    """Continuous-time SSM ``h' = A h + B x``, ``y = C h`` with step ``delta``.

    ``A`` holds the diagonal of the N×N state matrix. A full N×N matrix is
    accepted only if it is diagonal.
    """

    A: torch.Tensor
    B: torch.Tensor
    C: torch.Tensor
    delta: float

    def __post_init__(self):
        A = _as_tensor("A", self.A)
        if A.ndim == 2:
            if A.shape[0] != A.shape[1] or not torch.equal(A, torch.diag(torch.diagonal(A))):
                raise ValueError("A: only diagonal state matrices are supported")
            A = torch.diagonal(A).clone()
        elif A.ndim != 1:
            raise ValueError(f"A: expected diagonal vector or N×N matrix, got {tuple(A.shape)}")
        B = _as_tensor("B", self.B, ndim=2)
        C = _as_tensor("C", self.C, ndim=2)
        n = A.shape[0]
        if n < 1 or B.shape[0] != n or C.shape[1] != n or B.shape[1] < 1 or C.shape[0] < 1:
            raise ValueError(
                f"inconsistent shapes: A {tuple(A.shape)}, B {tuple(B.shape)}, C {tuple(C.shape)}"
            )
        delta = float(self.delta)
        if not math.isfinite(delta):
            raise ValueError("delta: non-finite")
        if delta <= 0:
            raise ValueError(f"delta: must be > 0, got {delta}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "delta", delta)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscreteSsm:
    A_bar: torch.Tensor  # N×N
    B_bar: torch.Tensor  # N×M1
    C: torch.Tensor  # M2×N

    @property
    def state_dim(self) -> int:
        return self.A_bar.shape[0]

    @property
    def in_dim(self) -> int:
        return self.B_bar.shape[1]

    @property
    def out_dim(self) -> int:
        return self.C.shape[0]


def zoh_input_factor(delta: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """``(ΔA)^{-1}(exp(ΔA) - 1)Δ`` for diagonal A, broadcast over ``delta * A``.

    Where ``|ΔA| < ZOH_SMALL`` the first-order series ``Δ(1 + ΔA/2)`` is used:
    it equals ``Δ`` exactly at ``A = 0`` and keeps the A-derivative continuous.
    """
    z = delta * A
    small = z.abs() < ZOH_SMALL
    # keep the unused branch finite so autograd through torch.where stays clean
    safe_A = torch.where(small, torch.ones_like(A), A)
    return torch.where(small, delta * (1 + 0.5 * z), torch.expm1(z) / safe_A)


def discretize(params: SsmParams) -> DiscreteSsm:
    delta = torch.tensor(params.delta, dtype=params.A.dtype)
    a_bar = torch.exp(delta * params.A)
    factor = zoh_input_factor(delta, params.A)
    return DiscreteSsm(
        A_bar=torch.diag(a_bar),
        B_bar=factor[:, None] * params.B,
        C=params.C.clone(),
    )


def _check_seq(ssm: DiscreteSsm, x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=ssm.A_bar.dtype)
    if x.ndim < 2 or x.shape[-1] != ssm.in_dim:
        raise ValueError(f"input: expected (..., L, {ssm.in_dim}), got {tuple(x.shape)}")
    return x


def scan(ssm: DiscreteSsm, x, h0=None) -> torch.Tensor:
    """Recurrence ``h_t = Ā h_{t-1} + B̄ x_t``, ``y_t = C h_t``, left to right.

    ``x`` is ``(..., L, M1)``; returns ``(..., L, M2)``.
    """
    x = _check_seq(ssm, x)
    batch, length = x.shape[:-2], x.shape[-2]
    if h0 is None:
        h = x.new_zeros(*batch, ssm.state_dim)
    else:
        h = torch.as_tensor(h0, dtype=x.dtype).expand(*batch, ssm.state_dim)
        if h.shape[-1] != ssm.state_dim:
            raise ValueError("h0: wrong state dimension")
    ys = []
    for t in range(length):
        h = h @ ssm.A_bar.T + x[..., t, :] @ ssm.B_bar.T
        ys.append(h @ ssm.C.T)
    if not ys:
        return x.new_zeros(*batch, 0, ssm.out_dim)
    return torch.stack(ys, dim=-2)


def kernel(ssm: DiscreteSsm, length: int) -> torch.Tensor:
    """Materialized taps ``K[t] = C Ā^t B̄`` for ``t < length``; shape (L, M2, M1)."""
    taps = []
    power_b = ssm.B_bar
    for _ in range(length):
        taps.append(ssm.C @ power_b)
        power_b = ssm.A_bar @ power_b
    if not taps:
        return ssm.C.new_zeros(0, ssm.out_dim, ssm.in_dim)
    return torch.stack(taps)


def kernel_apply(ssm: DiscreteSsm, x) -> torch.Tensor:
    """Causal convolution ``y_t = Σ_{τ≤t} K[τ] x_{t-τ}`` (zero initial state).

    Computed as a direct Toeplitz sum, so ``y_t`` never reads ``x_{>t}``.
    """
    x = _check_seq(ssm, x)
    length = x.shape[-2]
    if length == 0:
        return x.new_zeros(*x.shape[:-2], 0, ssm.out_dim)
    K = kernel(ssm, length)
    t = torch.arange(length)
    lag = t[:, None] - t[None, :]  # lag[t, s] = t - s
    causal = lag >= 0
    # K_full[t, s] = K[t - s] for s <= t, else 0
    K_full = K[lag.clamp(min=0)] * causal[..., None, None].to(K.dtype)
    return torch.einsum("tsoi,...si->...to", K_full, x)


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------


def selective_scan_ref(u, delta, A, B, C, D):
    """Plain-autograd selective scan. Reference path used to check the fused one.

    u, delta: (batch, L, E); A: (E, N); B, C: (batch, L, N); D: (E,).
    """
    batch, length, width = u.shape
    h = u.new_zeros(batch, width, A.shape[1])
    ys = []
    for t in range(length):
        d = delta[:, t, :, None]
        a = torch.exp(d * A)
        b = zoh_input_factor(d, A) * B[:, t, None, :]
        h = a * h + b * u[:, t, :, None]
        ys.append((h * C[:, t, None, :]).sum(-1) + D * u[:, t])
    return torch.stack(ys, dim=1)


SCAN_CHUNK = 16


class SelectiveScan(torch.autograd.Function):
    """Selective scan with a hand-written reverse pass, for strictly negative A.

    Works time-major in chunks of ``SCAN_CHUNK`` steps. Only the hidden-state
    history is kept for backward; per-step discretization is recomputed.
    With ``a = exp(ΔA)`` and ``φ = expm1(ΔA)/A`` the reverse pass uses
    ``∂φ/∂Δ = a`` and ``∂φ/∂A = (Δa - φ)/A``.
    """

    @staticmethod
    def _discretize(delta_c, A, inv_A):
        z = delta_c[..., None] * A
        return torch.exp(z), torch.expm1(z).mul_(inv_A)

    @staticmethod
    def _bmv(m, v):
        # (t, b, e, n) @ (t, b, n) -> (t, b, e)
        t, b, e, n = m.shape
        return torch.bmm(m.view(t * b, e, n), v.reshape(t * b, n, 1)).view(t, b, e)

    @staticmethod
    def _bvm(v, m):
        # (t, b, e) @ (t, b, e, n) -> (t, b, n)
        t, b, e, n = m.shape
        return torch.bmm(v.reshape(t * b, 1, e), m.view(t * b, e, n)).view(t, b, n)

    @staticmethod
    def forward(ctx, u, delta, A, B, C, D):
        # time-major contiguous copies: (L, batch, ...)
        u_t, d_t, B_t, C_t = (x.transpose(0, 1).contiguous() for x in (u, delta, B, C))
        length, batch, width = u_t.shape
        inv_A = 1.0 / A
        hs = u.new_empty(length, batch, width, A.shape[1])
        h = u.new_zeros(batch, width, A.shape[1])
        for c0 in range(0, length, SCAN_CHUNK):
            c1 = min(c0 + SCAN_CHUNK, length)
            a, phi = SelectiveScan._discretize(d_t[c0:c1], A, inv_A)
            bu = phi.mul_(B_t[c0:c1, :, None, :]).mul_(u_t[c0:c1, ..., None])
            for t in range(c0, c1):
                h = torch.addcmul(bu[t - c0], a[t - c0], h, out=hs[t])
        y = SelectiveScan._bmv(hs, C_t).addcmul_(D, u_t)
        ctx.save_for_backward(u_t, d_t, A, B_t, C_t, D, hs)
        return y.transpose(0, 1)

    @staticmethod
    def backward(ctx, gy):
        u_t, d_t, A, B_t, C_t, D, hs = ctx.saved_tensors
        g_t = gy.transpose(0, 1).contiguous()
        length = u_t.shape[0]
        inv_A = 1.0 / A
        du = torch.empty_like(u_t)
        ddelta = torch.empty_like(d_t)
        dB = torch.empty_like(B_t)
        dC = SelectiveScan._bvm(g_t, hs)
        dA = torch.zeros_like(A)
        dA_phi = torch.zeros_like(A)
        carry = torch.zeros_like(hs[0])  # a_{t+1} * dh_{t+1}
        for c0 in reversed(range(0, length, SCAN_CHUNK)):
            c1 = min(c0 + SCAN_CHUNK, length)
            a, phi = SelectiveScan._discretize(d_t[c0:c1], A, inv_A)
            dh = torch.empty_like(a)
            for i in reversed(range(c1 - c0)):
                torch.addcmul(carry, g_t[c0 + i, ..., None], C_t[c0 + i, :, None, :], out=dh[i])
                carry = a[i].mul_(dh[i])  # a now holds W = a * dh
            carry = carry.clone()  # W is overwritten below
            W, G = a, dh.mul_(phi)  # G = dh * phi
            del phi
            uc, dc, Bc = u_t[c0:c1], d_t[c0:c1], B_t[c0:c1]
            du[c0:c1] = SelectiveScan._bmv(G, Bc).addcmul_(D, g_t[c0:c1])
            dB[c0:c1] = SelectiveScan._bvm(uc, G)
            wb = SelectiveScan._bmv(W, Bc)
            # ∂/∂A of φ-terms: Σ dh·u·B·(Δa - φ) / A = Σ u·B·(W·Δ - G) / A
            V = G.neg_().addcmul_(W, dc[..., None])
            V.mul_(uc[..., None]).mul_(Bc[:, :, None, :])
            dA_phi += V.sum((0, 1))
            del G, V
            # W -> W * h_{t-1}
            if c0 > 0:
                W.mul_(hs[c0 - 1 : c1 - 1])
            else:
                W[0].zero_()
                W[1:].mul_(hs[: c1 - 1])
            ddelta[c0:c1] = (W * A).sum(-1).addcmul_(uc, wb)
            dA += W.mul_(dc[..., None]).sum((0, 1))
        dA += dA_phi * inv_A
        dD = (u_t * g_t).sum((0, 1))
        return du.transpose(0, 1), ddelta.transpose(0, 1), dA, dB.transpose(0, 1), dC.transpose(0, 1), dD


def selective_scan(u, delta, A, B, C, D):
    """Fused scan when every entry of A is strictly negative, else the reference path."""
    if bool((A < 0).all()):
        return SelectiveScan.apply(u, delta, A, B, C, D)
    return selective_scan_ref(u, delta, A, B, C, D)


class SelectiveMambaBlock(nn.Module):
    """Input-adaptive SSM block over a token sequence ``(batch, L, d_model)``.

    in_proj -> SiLU -> per-token (Δ, B, C) -> ZOH discretization -> scan,
    gated by ``SiLU(gate_proj(x))`` and mapped back by ``out_proj``. The caller
    adds the residual.
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 16,
        expand: int = 2,
        dt_rank: int | None = None,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
        name: str = "mamba",
    ):
        super().__init__()
        self.name = name
        self.d_model = d_model
        self.d_state = d_state
        self.d_inner = expand * d_model
        self.dt_rank = dt_rank or math.ceil(d_model / 16)

        self.in_proj = nn.Linear(d_model, self.d_inner, bias=False)
        self.gate_proj = nn.Linear(d_model, self.d_inner, bias=True)
        self.x_proj = nn.Linear(self.d_inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, self.d_inner, bias=True)
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)

        A = torch.arange(1, d_state + 1, dtype=torch.get_default_dtype()).repeat(self.d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(self.d_inner))

        # dt bias so that softplus(bias) is log-uniform in [dt_min, dt_max]
        dt = torch.exp(
            torch.rand(self.d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        )
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        self.fused = True

    def ssm(self, x: torch.Tensor) -> torch.Tensor:
        """Ungated scan output ``(batch, L, d_inner)``."""
        u = F.silu(self.in_proj(x))
        dt, Bm, Cm = torch.split(self.x_proj(u), [self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        scan_fn = selective_scan if self.fused else selective_scan_ref
        return scan_fn(u, delta, A, Bm, Cm, self.D)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] == 0:
            raise ValueError(f"{self.name}: empty token sequence")
        y = self.ssm(x) * F.silu(self.gate_proj(x))
        out = self.out_proj(y)
        if not torch.isfinite(out).all():
            raise TrainingFault(self.name, "non-finite activation")
        return out
