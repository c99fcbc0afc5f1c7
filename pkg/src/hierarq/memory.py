"""Bounded memory banks.

A bank holds at most ``capacity`` entries of shape (B, N, D), stacked as one
(S, B, N, D) tensor. Push appends the newest entry; once the stack exceeds
capacity the bank restores it by policy:

  fifo   drop the oldest entry
  mbc    merge the adjacent pair with the highest cosine similarity
         (ties break to the lowest index), either independently per slot n
         ("token" granularity) or for whole entries ("frame" granularity)

Merging replaces the pair by its arithmetic mean; with ``weighted_merge`` the
mean is weighted by how many source timesteps each side already absorbed,
which keeps the count-weighted slot average equal to the average of
everything ever pushed. Source provenance (count and inclusive timestep
interval per surviving slot token) is tracked for inspection and testing.

With ``detach_history`` (the default), entries from earlier timesteps are
frozen: gradients reach only the current timestep's entry, never history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .errors import DimensionError

_COS_EPS = 1e-12


@dataclass
class BankSpec:
    capacity: int
    policy: str = "fifo"                # "fifo" | "mbc"
    granularity: str = "token"          # "token" | "frame", mbc only
    weighted_merge: bool = False
    detach_history: bool = True

    def __post_init__(self):
        if self.capacity < 1:
            raise DimensionError(f"bank capacity must be >= 1, got {self.capacity}")
        if self.policy not in ("fifo", "mbc"):
            raise DimensionError(f"unknown bank policy {self.policy!r}")
        if self.granularity not in ("token", "frame"):
            raise DimensionError(f"unknown granularity {self.granularity!r}")


def _adjacent_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine over the last axis with the kernel's conventions.

    Zero vectors give similarity 0; the result is clamped to [-1, 1]."""
    dots = np.einsum("...d,...d->...", a, b)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    sims = dots / (na * nb + _COS_EPS)
    sims = np.clip(sims, -1.0, 1.0)
    sims[(na == 0.0) | (nb == 0.0)] = 0.0
    return sims


class MemoryBank:
    """One bounded bank; see module docstring for semantics."""

    def __init__(self, spec: BankSpec, n_slots: int, width: int):
        self.spec = spec
        self.n_slots = int(n_slots)
        self.width = int(width)
        self.entries: tk.Tensor | None = None     # (S, B, N, D)
        self.counts: np.ndarray | None = None     # (S, B, N) source timesteps absorbed
        self.lo: np.ndarray | None = None         # (S, B, N) first source timestep, 1-based
        self.hi: np.ndarray | None = None         # (S, B, N) last source timestep
        self.pushed = 0

    # -- state inspection ---------------------------------------------------

    @property
    def length(self) -> int:
        return 0 if self.entries is None else self.entries.shape[0]

    def values(self) -> np.ndarray:
        if self.entries is None:
            return np.zeros((0, 0, self.n_slots, self.width))
        return self.entries.data.copy()

    def state_floats(self) -> int:
        return 0 if self.entries is None else self.entries.size

    # -- the one mutating operation ------------------------------------------

    def push(self, item: tk.Tensor) -> None:
        if item.ndim != 3 or item.shape[1:] != (self.n_slots, self.width):
            raise DimensionError(
                f"bank expects (B, {self.n_slots}, {self.width}) entries, got {item.shape}")
        batch = item.shape[0]
        self.pushed += 1
        new_row = tk.reshape(item, (1,) + item.shape)
        prov_row = np.full((1, batch, self.n_slots), self.pushed, dtype=np.int64)

        if self.entries is None:
            self.entries = new_row
            self.counts = np.ones_like(prov_row)
            self.lo = prov_row.copy()
            self.hi = prov_row.copy()
            return
        if self.entries.shape[1] != batch:
            raise DimensionError(
                f"bank batch size changed from {self.entries.shape[1]} to {batch}")

        history = self.entries.detach() if self.spec.detach_history else self.entries
        stacked = tk.concat([history, new_row], axis=0)
        self.counts = np.concatenate([self.counts, np.ones_like(prov_row)], axis=0)
        self.lo = np.concatenate([self.lo, prov_row], axis=0)
        self.hi = np.concatenate([self.hi, prov_row.copy()], axis=0)

        if stacked.shape[0] <= self.spec.capacity:
            self.entries = stacked
            return
        if self.spec.policy == "fifo":
            self.entries = tk.slice0(stacked, 1, stacked.shape[0])
            self.counts = self.counts[1:]
            self.lo = self.lo[1:]
            self.hi = self.hi[1:]
        else:
            self._compress(stacked)

    def _compress(self, stacked: tk.Tensor) -> None:
        s_old, batch, n, d = stacked.shape
        s_new = s_old - 1
        v = stacked.data
        if self.spec.granularity == "token":
            sims = _adjacent_cosine(v[:-1], v[1:])            # (S-1, B, N)
            k = np.argmax(sims, axis=0)                       # lowest index wins ties
        else:
            flat = v.reshape(s_old, batch, n * d)
            sims = _adjacent_cosine(flat[:-1], flat[1:])      # (S-1, B)
            k = np.repeat(np.argmax(sims, axis=0)[:, None], n, axis=1)

        c_a = np.take_along_axis(self.counts, k[None], axis=0)[0]
        c_b = np.take_along_axis(self.counts, (k + 1)[None], axis=0)[0]
        if self.spec.weighted_merge:
            total = (c_a + c_b).astype(v.dtype)
            w_a = c_a.astype(v.dtype) / total
            w_b = c_b.astype(v.dtype) / total
        else:
            w_a = np.full(k.shape, 0.5, dtype=v.dtype)
            w_b = w_a

        # selection matrix: rows below k pass through, row k averages the
        # pair, rows above shift down by one
        bgrid, ngrid = np.indices((batch, n))
        sn = np.broadcast_to(np.arange(s_new)[:, None, None], (s_new, batch, n))
        src = np.where(sn < k[None], sn, sn + 1)
        wsel = np.zeros((s_new, s_old, batch, n), dtype=v.dtype)
        bg = np.broadcast_to(bgrid[None], (s_new, batch, n))
        ng = np.broadcast_to(ngrid[None], (s_new, batch, n))
        wsel[sn, src, bg, ng] = 1.0
        wsel[k, k, bgrid, ngrid] = w_a
        wsel[k, k + 1, bgrid, ngrid] = w_b
        self.entries = tk.slot_mix(wsel, stacked)

        merged_counts = c_a + c_b
        merged_hi = np.take_along_axis(self.hi, (k + 1)[None], axis=0)[0]
        merged_lo = np.take_along_axis(self.lo, k[None], axis=0)[0]
        self.counts = np.take_along_axis(self.counts, src, axis=0)
        self.lo = np.take_along_axis(self.lo, src, axis=0)
        self.hi = np.take_along_axis(self.hi, src, axis=0)
        np.put_along_axis(self.counts, k[None], merged_counts[None], axis=0)
        np.put_along_axis(self.lo, k[None], merged_lo[None], axis=0)
        np.put_along_axis(self.hi, k[None], merged_hi[None], axis=0)

    # -- reads ----------------------------------------------------------------

    def read_tokens(self) -> tk.Tensor:
        """All entries flattened to (B, S*N, D) key/value rows, oldest first."""
        if self.entries is None:
            raise DimensionError("reading an empty memory bank")
        s, b, n, d = self.entries.shape
        return tk.reshape(tk.permute(self.entries, (1, 0, 2, 3)), (b, s * n, d))
