"""Numerical primitives: normalization, similarity logits, softmax and the losses.

Every function accepts a single vector or a batch (leading batch axis) and is
differentiable through torch autograd. Inputs that are not tensors are
converted with float64 precision.
"""
from __future__ import annotations

import math
from typing import Literal

import torch

from .errors import DomainError, ShapeError

NORM_EPS = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0 or not math.isfinite(tau):
        raise DomainError(f"temperature must be a positive finite number, got {tau}")
    return tau


def l2_normalize(v, eps: float = NORM_EPS) -> torch.Tensor:
    """Scale ``v`` to unit Euclidean norm along the last axis.

    Vectors shorter than ``eps`` are divided by ``eps`` instead, so the zero
    vector maps to itself.
    """
    v = _as_tensor(v)
    if not torch.isfinite(v).all():
        raise DomainError("l2_normalize received non-finite entries")
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    return v / norm.clamp_min(eps)


def similarity_logits(u, table) -> torch.Tensor:
    """Dot products of (normalized) features with every row of the class table."""
    u = _as_tensor(u)
    table = _as_tensor(table)
    if table.dim() != 2:
        raise ShapeError(f"class table must be 2-D, got shape {tuple(table.shape)}")
    if u.shape[-1] != table.shape[1]:
        raise ShapeError(
            f"feature dim {u.shape[-1]} does not match class table dim {table.shape[1]}"
        )
    return u @ table.T.to(u.dtype)


def log_softmax(q, tau: float = 1.0) -> torch.Tensor:
    q = _as_tensor(q)
    z = q / _check_tau(tau)
    z = z - z.max(dim=-1, keepdim=True).values
    return z - torch.logsumexp(z, dim=-1, keepdim=True)


def softmax(q, tau: float = 1.0) -> torch.Tensor:
    """Temperature softmax, stabilized by subtracting the row maximum."""
    return log_softmax(q, tau).exp()


def cross_entropy(q, y, tau: float = 1.0) -> torch.Tensor:
    """``-log softmax(q / tau)[y]``; batches are averaged."""
    q = _as_tensor(q)
    n = q.shape[-1]
    y = torch.as_tensor(y, dtype=torch.long)
    if ((y < 0) | (y >= n)).any():
        raise IndexError(f"label out of range for {n} classes: {y.tolist()}")
    logp = log_softmax(q, tau)
    if q.dim() == 1:
        return -logp[y]
    if y.shape != q.shape[:-1]:
        raise ShapeError(f"labels shape {tuple(y.shape)} vs logits {tuple(q.shape)}")
    return -logp.gather(-1, y.unsqueeze(-1)).squeeze(-1).mean()


def kd_loss(q_teacher, q_student, tau: float = 1.0) -> torch.Tensor:
    """Temperature-scaled KL divergence KL(teacher || student) times tau**2.

    The teacher distribution is the reference measure. For a batch the
    per-sample divergences are averaged before the tau**2 factor.
    """
    q_teacher = _as_tensor(q_teacher)
    q_student = _as_tensor(q_student)
    if q_teacher.shape != q_student.shape:
        raise ShapeError(
            f"teacher logits {tuple(q_teacher.shape)} vs student {tuple(q_student.shape)}"
        )
    tau = _check_tau(tau)
    log_p = log_softmax(q_teacher, tau)
    log_q = log_softmax(q_student, tau)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    if kl.dim() > 0:
        kl = kl.mean()
    return kl * tau**2


def feature_kd_loss(u_teacher, u_student, kind: Literal["L1", "MSE"] = "MSE") -> torch.Tensor:
    """Mean absolute (L1) or mean squared (MSE) coordinate difference."""
    u_teacher = _as_tensor(u_teacher)
    u_student = _as_tensor(u_student)
    if u_teacher.shape != u_student.shape:
        raise ShapeError(
            f"teacher features {tuple(u_teacher.shape)} vs student {tuple(u_student.shape)}"
        )
    diff = u_student - u_teacher
    kind = kind.upper()
    if kind == "L1":
        return diff.abs().mean()
    if kind == "MSE":
        return diff.pow(2).mean()
    raise DomainError(f"unknown feature loss kind {kind!r}")


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    """2ab / (a + b); works on fractions or percentages alike."""
    a, b = float(base_acc), float(novel_acc)
    if not (a > 0 and b > 0):
        raise DomainError(f"harmonic mean needs positive accuracies, got ({a}, {b})")
    return 2.0 * a * b / (a + b)


def argmax(q) -> torch.Tensor:
    """Index of the maximum along the last axis; ties go to the lowest index."""
    # torch documents first-occurrence semantics for ties
    return torch.argmax(_as_tensor(q), dim=-1)
