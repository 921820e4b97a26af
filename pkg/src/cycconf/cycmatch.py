"""Instance-level temporal cycle matching losses.

Everything here is plain float64 numpy with hand-written backward passes, so
the same kernels are used by the gradient checks and (through
:func:`torch_cycle_loss`) by the torch training loop.

Two sign conventions share one pipeline:

* ``confusion`` - the forward match weights grow with distance, so every
  instance at t0 is pulled toward the *most different* proposals at t1,
  and the backward classification uses positive distances as logits.
* ``consistency`` - distances are negated in both passes, giving the usual
  nearest-neighbour cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

CONFUSION = "confusion"
CONSISTENCY = "consistency"
_SIGNS = {CONFUSION: 1.0, CONSISTENCY: -1.0}


class ContractError(ValueError):
    """Raised when an input violates a shape or value contract."""


class EmptyTargetError(ContractError):
    """Forward matching was asked to normalise over zero targets."""


class NumericError(ArithmeticError):
    """A non-finite value appeared inside the matching pipeline."""


@dataclass
class SslLossResult:
    loss: float
    grads_u: np.ndarray
    grads_v: np.ndarray
    skipped: bool = False
    # diagnostics, empty when skipped
    alpha: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    per_instance: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _as_matrix(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"{name} must be a 2-D matrix, got shape {x.shape}")
    return x


def pairwise_sq_dist(U, V) -> np.ndarray:
    """Squared euclidean distance between every row of ``U`` and every row of ``V``."""
    U = _as_matrix(U, "U")
    V = _as_matrix(V, "V")
    if U.shape[1] != V.shape[1]:
        raise ContractError(f"embedding dims differ: {U.shape[1]} vs {V.shape[1]}")
    if not (np.isfinite(U).all() and np.isfinite(V).all()):
        raise ContractError("embeddings must be finite")
    # explicit differences rather than the |u|^2 - 2uv + |v|^2 expansion:
    # exact zeros on the diagonal and no cancellation for large norms
    diff = U[:, None, :] - V[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def _row_softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def forward_match_weights(S, temperature: float = 1.0, mode: str = CONFUSION) -> np.ndarray:
    """Row-wise softmax of ``sign * S / temperature`` (max-subtracted).

    With the default confusion mode a larger distance yields a larger weight.
    """
    S = _as_matrix(S, "S")
    if S.shape[1] == 0:
        raise EmptyTargetError("cannot form match weights over zero targets")
    if not np.isfinite(S).all():
        raise ContractError("distance matrix must be finite")
    return _row_softmax(_SIGNS[mode] * S / temperature)


def soft_targets(alpha, V) -> np.ndarray:
    alpha = _as_matrix(alpha, "alpha")
    V = _as_matrix(V, "V")
    if alpha.shape[1] != V.shape[0]:
        raise ContractError(f"alpha has {alpha.shape[1]} columns but V has {V.shape[0]} rows")
    return alpha @ V


def backward_logits(U, Vhat) -> np.ndarray:
    """``out[k, i] = |u_k - vhat_i|^2``; column ``i`` scores every t0 instance against soft target ``i``."""
    U = _as_matrix(U, "U")
    Vhat = _as_matrix(Vhat, "Vhat")
    if U.shape[1] != Vhat.shape[1]:
        raise ContractError(f"embedding dims differ: {U.shape[1]} vs {Vhat.shape[1]}")
    return pairwise_sq_dist(U, Vhat)


def _softmax_backward(A, dA):
    return A * (dA - (dA * A).sum(axis=1, keepdims=True))


def _sq_dist_backward(U, V, dS):
    """Gradients of ``sum(dS * pairwise_sq_dist(U, V))`` w.r.t. ``U`` and ``V``."""
    gU = 2.0 * (dS.sum(axis=1)[:, None] * U - dS @ V)
    gV = 2.0 * (dS.sum(axis=0)[:, None] * V - dS.T @ U)
    return gU, gV


def _one_direction(U, V, sign, temperature):
    n0 = U.shape[0]
    S = pairwise_sq_dist(U, V)
    A = _row_softmax(sign * S / temperature)
    Vh = A @ V
    B = pairwise_sq_dist(U, Vh)  # B[k, i]

    # column i of B holds the logits of classification problem i
    L = sign * B.T / temperature  # L[i, k]
    m = L.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(L - m).sum(axis=1))
    per_instance = lse - np.diagonal(L)
    loss = per_instance.mean()

    P = np.exp(L - lse[:, None])
    G = (P - np.eye(n0)) / n0  # dloss/dL
    dB = sign / temperature * G.T

    gU, gVh = _sq_dist_backward(U, Vh, dB)
    dA = gVh @ V.T
    gV = A.T @ gVh
    dS = sign / temperature * _softmax_backward(A, dA)
    gU2, gV2 = _sq_dist_backward(U, V, dS)
    gU += gU2
    gV += gV2

    if not (np.isfinite(loss) and np.isfinite(gU).all() and np.isfinite(gV).all()):
        raise NumericError("non-finite value in cycle loss")
    return loss, gU, gV, A, per_instance


def _cycle_loss(U, V, mode, temperature, symmetric):
    U = _as_matrix(U, "U")
    V = _as_matrix(V, "V")
    if U.shape[1] != V.shape[1]:
        raise ContractError(f"embedding dims differ: {U.shape[1]} vs {V.shape[1]}")
    if U.shape[0] == 0 or V.shape[0] == 0:
        return SslLossResult(0.0, np.zeros_like(U), np.zeros_like(V), skipped=True)
    if not (np.isfinite(U).all() and np.isfinite(V).all()):
        raise NumericError("embeddings must be finite")
    sign = _SIGNS[mode]
    loss, gU, gV, A, per = _one_direction(U, V, sign, temperature)
    if symmetric:
        loss_b, gV_b, gU_b, _, _ = _one_direction(V, U, sign, temperature)
        loss += loss_b
        gU += gU_b
        gV += gV_b
    return SslLossResult(float(loss), gU, gV, skipped=False, alpha=A, per_instance=per)


def cycle_confusion_loss(U, V, temperature: float = 1.0, symmetric: bool = False) -> SslLossResult:
    """Cycle confusion loss between t0 embeddings ``U`` and t1 embeddings ``V``.

    The soft target of each t0 instance is the weighted average of ``V``
    under forward weights ``softmax(+dist)``; the loss is the mean
    cross-entropy of classifying each soft target back to its source row of
    ``U`` using ``+dist`` as logits. Gradients cover the whole cycle (no
    detach on the soft target).

    An empty frame on either side gives ``skipped=True`` and zero loss.
    ``symmetric`` adds the t1 -> t0 -> t1 term.
    """
    return _cycle_loss(U, V, CONFUSION, temperature, symmetric)


def cycle_consistency_loss(U, V, temperature: float = 1.0, symmetric: bool = False) -> SslLossResult:
    """Nearest-neighbour baseline: :func:`cycle_confusion_loss` with negated distances."""
    return _cycle_loss(U, V, CONSISTENCY, temperature, symmetric)


def cycle_loss(U, V, mode: str = CONFUSION, temperature: float = 1.0, symmetric: bool = False) -> SslLossResult:
    if mode not in _SIGNS:
        raise ContractError(f"unknown matching mode {mode!r}")
    return _cycle_loss(U, V, mode, temperature, symmetric)


def matching_entropy(alpha) -> float:
    """Mean Shannon entropy (nats) of the rows of a row-stochastic matrix; 0 log 0 = 0."""
    alpha = _as_matrix(alpha, "alpha")
    if (alpha < 0).any():
        raise ContractError("match weights must be nonnegative")
    if alpha.shape[0] == 0:
        return 0.0
    safe = np.where(alpha > 0, alpha, 1.0)
    return float(-(alpha * np.log(safe)).sum(axis=1).mean())


class _InjectGrad(torch.autograd.Function):
    """Carries precomputed numpy gradients back into the torch graph."""

    @staticmethod
    def forward(ctx, U, V, loss, gU, gV):
        ctx.save_for_backward(gU, gV)
        return U.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_out):
        gU, gV = ctx.saved_tensors
        return grad_out * gU, grad_out * gV, None, None, None


def torch_cycle_loss(U: torch.Tensor, V: torch.Tensor, mode: str = CONFUSION,
                     temperature: float = 1.0, symmetric: bool = False):
    """Differentiable cycle loss on torch embeddings.

    The value and gradients come from the float64 numpy kernel. Returns
    ``(loss_tensor, SslLossResult)``; the result carries the forward weights
    for entropy logging. Skipped pairs give a zero loss still attached to the graph.
    """
    res = cycle_loss(U.detach().cpu().double().numpy(), V.detach().cpu().double().numpy(),
                     mode, temperature, symmetric)
    if res.skipped:
        return U.sum() * 0.0 + V.sum() * 0.0, res
    gU = torch.from_numpy(res.grads_u).to(U.dtype)
    gV = torch.from_numpy(res.grads_v).to(V.dtype)
    return _InjectGrad.apply(U, V, res.loss, gU, gV), res
