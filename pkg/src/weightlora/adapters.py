"""Low-rank adapters on frozen linear maps, with optional scalar gates.

An adapter on a ``(d, k)`` weight holds ``A`` of shape ``(d, r)`` and ``B`` of
shape ``(r, k)``; the update it contributes is ``(alpha / r) * A @ B``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DegeneracyError, DimensionError, StateError
from .tensor import Tensor

DEFAULT_ALPHA = 32.0
DEFAULT_DROPOUT = 0.05
QR_RANK_TOL = 1e-12
CHECKPOINT_FORMAT = "weightlora-adapters"
CHECKPOINT_VERSION = 1


@dataclass
class FrozenBase:
    """A pretrained weight that never receives updates."""

    W: Tensor

    def __post_init__(self):
        if not isinstance(self.W, Tensor):
            self.W = Tensor(self.W)
        self.W.requires_grad = False
        if self.W.ndim != 2:
            raise DimensionError(f"base weight must be 2-D, got {self.W.shape}")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[1]


@dataclass
class AdapterState:
    layer_id: int
    A: Tensor
    B: Tensor
    alpha: float = DEFAULT_ALPHA
    dropout_p: float = DEFAULT_DROPOUT
    active: bool = True
    # divisor of alpha; equals the rank unless a rescale policy pinned it
    scale_rank: int | None = None

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise DimensionError(f"adapter factors {self.A.shape} and {self.B.shape} do not chain")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.scale_rank is None:
            self.scale_rank = self.rank

    @classmethod
    def init(cls, layer_id: int, d: int, k: int, r: int, *, alpha: float = DEFAULT_ALPHA,
             dropout_p: float = DEFAULT_DROPOUT, init_std: float | None = None,
             rng: np.random.Generator | None = None, dtype=None) -> AdapterState:
        """Gaussian ``A``, zero ``B``: the adapter starts as an exact no-op."""
        if r < 1 or r > min(d, k):
            raise ContractError(f"rank must satisfy 1 <= r <= min(d, k) = {min(d, k)}, got {r}")
        rng = rng if rng is not None else np.random.default_rng()
        dtype = dtype or T.get_default_dtype()
        std = init_std if init_std is not None else 1.0 / np.sqrt(d)
        A = Tensor(rng.standard_normal((d, r)) * std, requires_grad=True, dtype=dtype)
        B = Tensor(np.zeros((r, k)), requires_grad=True, dtype=dtype)
        return cls(layer_id, A, B, alpha=alpha, dropout_p=dropout_p)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.B.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.scale_rank

    def params(self) -> list[Tensor]:
        return [self.A, self.B]

    def delta(self) -> np.ndarray:
        """Materialized effective update ``(alpha / r) A B``."""
        return self.scale * (self.A.data @ self.B.data)


def adapter_param_count(adapter: AdapterState) -> int:
    return adapter.rank * (adapter.d + adapter.k) if adapter.active else 0


def _check_input(base: FrozenBase, adapter: AdapterState, x: Tensor) -> None:
    if adapter.A.shape[0] != base.d or adapter.B.shape[1] != base.k:
        raise DimensionError(
            f"adapter {adapter.A.shape}x{adapter.B.shape} does not fit base {base.W.shape}")
    if x.ndim != 2 or x.shape[0] != base.k:
        raise DimensionError(f"input {x.shape} does not match base {base.W.shape}")


def _branch(adapter: AdapterState, x: Tensor, train: bool, rng) -> Tensor:
    if train and adapter.dropout_p > 0.0:
        if rng is None:
            raise ContractError("train-mode dropout needs an rng")
        keep = 1.0 - adapter.dropout_p
        mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
        x = T.mul(x, Tensor(mask, dtype=x.data.dtype.type))
    return T.scale(T.matmul(adapter.A, T.matmul(adapter.B, x)), adapter.scale)


def lora_forward(base: FrozenBase, adapter: AdapterState, x: Tensor, *,
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """``W x + (alpha/r) A (B x)``; dropout hits only the adapter input in train mode."""
    _check_input(base, adapter, x)
    return T.add(T.matmul(base.W, x), _branch(adapter, x, train, rng))


def weighted_forward(base: FrozenBase, adapter: AdapterState, omega_i: Tensor, x: Tensor, *,
                     frozen: bool = False, gate_mode: str = "nonzero", train: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Gated forward ``W x + omega_i (alpha/r) A (B x)``.

    Once the gates are frozen, a closed gate skips the branch entirely; the
    gate is closed when ``omega_i == 0`` (``gate_mode="nonzero"``) or when
    ``omega_i <= 0`` (``gate_mode="positive"``).
    """
    _check_input(base, adapter, x)
    w = float(omega_i.data) if isinstance(omega_i, Tensor) else float(omega_i)
    if frozen and not gate_open(w, gate_mode):
        return T.matmul(base.W, x)
    return T.add(T.matmul(base.W, x), T.mul(omega_i, _branch(adapter, x, train, rng)))


def gate_open(w: float, gate_mode: str = "nonzero") -> bool:
    if gate_mode == "nonzero":
        return w != 0.0
    if gate_mode == "positive":
        return w > 0.0
    raise ContractError(f"unknown gate_mode {gate_mode!r}")


# -- rank expansion ---------------------------------------------------------------
def householder_qr(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of a tall ``(m, n)`` matrix by Householder reflections."""
    A = np.asarray(A, dtype=np.float64)
    m, n = A.shape
    if m < n:
        raise DimensionError(f"thin QR needs m >= n, got {A.shape}")
    R = A.copy()
    vs = []
    for j in range(n):
        x = R[j:, j]
        normx = np.linalg.norm(x)
        if normx == 0.0:
            vs.append(None)
            continue
        v = x.copy()
        v[0] += np.copysign(normx, x[0])
        v /= np.linalg.norm(v)
        R[j:, j:] -= 2.0 * np.outer(v, v @ R[j:, j:])
        vs.append(v)
    Q = np.eye(m, n)
    for j in range(n - 1, -1, -1):
        v = vs[j]
        if v is not None:
            Q[j:, :] -= 2.0 * np.outer(v, v @ Q[j:, :])
    return Q, np.triu(R[:n, :])


def _rescaled(adapter: AdapterState, A: np.ndarray, B: np.ndarray, rescale: str) -> AdapterState:
    if rescale not in ("rank", "keep"):
        raise ContractError(f"rescale must be 'rank' or 'keep', got {rescale!r}")
    dtype = adapter.A.data.dtype.type
    out = AdapterState(adapter.layer_id,
                       Tensor(A, requires_grad=True, dtype=dtype),
                       Tensor(B, requires_grad=True, dtype=dtype),
                       alpha=adapter.alpha, dropout_p=adapter.dropout_p, active=adapter.active,
                       scale_rank=A.shape[1] if rescale == "rank" else adapter.scale_rank)
    return out


def _check_expand(adapter: AdapterState, r_new: int) -> None:
    if not adapter.active:
        raise StateError(f"adapter {adapter.layer_id} is disconnected; cannot expand")
    if r_new <= adapter.rank:
        raise ContractError(f"r_new must exceed current rank {adapter.rank}, got {r_new}")
    if r_new > min(adapter.d, adapter.k):
        raise ContractError(f"r_new={r_new} exceeds min(d, k)={min(adapter.d, adapter.k)}")


def expand_rank_gaussian(adapter: AdapterState, r_new: int, seed=None, *,
                         rescale: str = "rank", init_std: float | None = None) -> AdapterState:
    """Append Gaussian columns to ``A`` and zero rows to ``B``; ``A B`` is unchanged."""
    _check_expand(adapter, r_new)
    rng = np.random.default_rng(seed)
    d, r, k = adapter.d, adapter.rank, adapter.k
    std = init_std if init_std is not None else 1.0 / np.sqrt(d)
    G = rng.standard_normal((d, r_new - r)) * std
    A = np.hstack([adapter.A.data, G])
    B = np.vstack([adapter.B.data, np.zeros((r_new - r, k))])
    return _rescaled(adapter, A, B, rescale)


def expand_rank_qr(adapter: AdapterState, r_new: int, seed=None, *,
                   rescale: str = "rank") -> AdapterState:
    """Re-express ``A B`` as ``Q (R B)`` and pad ``Q`` with directions orthogonal to it.

    New columns are Gaussian draws projected onto the orthogonal complement of
    ``range(Q)``; the matching rows of ``B`` are zero.
    """
    _check_expand(adapter, r_new)
    Q, R = householder_qr(adapter.A.data)
    diag = np.abs(np.diag(R))
    if diag.max() == 0.0 or diag.min() < QR_RANK_TOL * diag.max():
        raise DegeneracyError(
            f"adapter {adapter.layer_id}: A is rank deficient "
            f"(|R_ii| min/max = {diag.min():.3e}/{diag.max():.3e}); use the gaussian scheme")
    rng = np.random.default_rng(seed)
    d, r, k = adapter.d, adapter.rank, adapter.k
    N = rng.standard_normal((d, r_new - r)) / np.sqrt(d)
    for _ in range(2):  # second pass removes rounding drift back into range(Q)
        N = N - Q @ (Q.T @ N)
    A = np.hstack([Q, N])
    B = np.vstack([R @ adapter.B.data, np.zeros((r_new - r, k))])
    return _rescaled(adapter, A, B, rescale)


def expansion_residual(before: AdapterState, after: AdapterState) -> float:
    """``||A'B' - AB||_F / max(1, ||AB||_F)`` on the raw factor products."""
    old = before.A.data @ before.B.data
    new = after.A.data @ after.B.data
    return float(np.linalg.norm(new - old) / max(1.0, np.linalg.norm(old)))


# -- checkpoints ------------------------------------------------------------------------
def adapters_to_dict(adapters, omega=None, active_set=None) -> dict:
    items = []
    for a in adapters:
        items.append({
            "layer_id": int(a.layer_id), "d": a.d, "k": a.k, "r": a.rank,
            "alpha": float(a.alpha), "scale_rank": int(a.scale_rank),
            "dropout_p": float(a.dropout_p), "active": bool(a.active),
            "A": a.A.data.reshape(-1).tolist(), "B": a.B.data.reshape(-1).tolist(),
        })
    out = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "adapters": items}
    if omega is not None:
        out["omega"] = [float(w) for w in np.asarray(omega).reshape(-1)]
    if active_set is not None:
        out["active_set"] = sorted(int(i) for i in active_set)
    return out


def adapters_from_dict(payload: dict) -> list[AdapterState]:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"not an adapter checkpoint (format={payload.get('format')!r})")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')!r}")
    out = []
    for item in payload["adapters"]:
        d, k, r = item["d"], item["k"], item["r"]
        A = np.asarray(item["A"], dtype=np.float64).reshape(d, r)
        B = np.asarray(item["B"], dtype=np.float64).reshape(r, k)
        out.append(AdapterState(item["layer_id"], Tensor(A, requires_grad=True),
                                Tensor(B, requires_grad=True), alpha=item["alpha"],
                                dropout_p=item.get("dropout_p", DEFAULT_DROPOUT),
                                active=item["active"], scale_rank=item.get("scale_rank", r)))
    return out


def save_adapters(path, adapters, omega=None, active_set=None) -> None:
    Path(path).write_text(json.dumps(adapters_to_dict(adapters, omega, active_set)))


def load_adapters(path) -> tuple[list[AdapterState], dict]:
    payload = json.loads(Path(path).read_text())
    return adapters_from_dict(payload), payload
