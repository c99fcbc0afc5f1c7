"""Memory bank tests.

The merge-compression oracle here is an independent list-based
reimplementation with explicit Python loops; the bank itself works on
stacked arrays, so agreement is meaningful. Exact (bit-level) equality is
required at 64-bit.
"""

import numpy as np
import pytest

from hierarq import tensor as tk
from hierarq.errors import DimensionError
from hierarq.memory import BankSpec, MemoryBank

F64 = np.float64


# --------------------------------------------------------------------------
# oracles

def cos1(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = float(np.dot(a, b)) / (na * nb + 1e-12)
    return max(-1.0, min(1.0, c))


def merge_pair(seq: list, kk: int, weighted: bool) -> None:
    va, ca, loa, _ = seq[kk]
    vb, cb, _, hib = seq[kk + 1]
    if weighted:
        wa = ca / (ca + cb)
        wb = cb / (ca + cb)
    else:
        wa = 0.5
        wb = 0.5
    seq[kk:kk + 2] = [(wa * va + wb * vb, ca + cb, loa, hib)]


def mbc_token_oracle(pushed: list[np.ndarray], cap: int, weighted: bool = False) -> list[list]:
    """Per-slot sequences of (value, count, lo, hi) after streaming compression."""
    n = pushed[0].shape[0]
    slots: list[list] = [[] for _ in range(n)]
    for t, grid in enumerate(pushed, start=1):
        for j in range(n):
            slots[j].append((grid[j].copy(), 1, t, t))
        if len(slots[0]) > cap:
            for j in range(n):
                seq = slots[j]
                sims = [cos1(seq[i][0], seq[i + 1][0]) for i in range(len(seq) - 1)]
                merge_pair(seq, int(np.argmax(sims)), weighted)
    return slots


def mbc_frame_oracle(pushed: list[np.ndarray], cap: int, weighted: bool = False) -> list:
    seq: list = []
    for t, grid in enumerate(pushed, start=1):
        seq.append((grid.copy(), 1, t, t))
        if len(seq) > cap:
            sims = [cos1(seq[i][0].reshape(-1), seq[i + 1][0].reshape(-1))
                    for i in range(len(seq) - 1)]
            merge_pair(seq, int(np.argmax(sims)), weighted)
    return seq


def run_bank(pushed: list[np.ndarray], spec: BankSpec) -> MemoryBank:
    bank = MemoryBank(spec, n_slots=pushed[0].shape[0], width=pushed[0].shape[1])
    for grid in pushed:
        bank.push(tk.Tensor(grid[None]))  # batch of one
    return bank


def random_pushes(rng, t, n, d, ties=False) -> list[np.ndarray]:
    out = []
    for _ in range(t):
        g = rng.standard_normal((n, d))
        out.append(g)
    if ties and t >= 4:
        out[1] = out[0].copy()   # exact duplicate forces a cosine tie region
        out[3] = out[2].copy()
    return out


# --------------------------------------------------------------------------
# fifo

def test_fifo_keeps_last_m_bit_identical():
    rng = np.random.default_rng(0)
    pushed = random_pushes(rng, 9, 3, 4)
    bank = run_bank(pushed, BankSpec(capacity=4, policy="fifo"))
    vals = bank.values()[:, 0]           # (S, N, D)
    want = np.stack(pushed[-4:])
    assert vals.tobytes() == want.astype(vals.dtype).tobytes()
    assert bank.lo[:, 0, 0].tolist() == [6, 7, 8, 9]


def test_fifo_under_capacity():
    rng = np.random.default_rng(1)
    pushed = random_pushes(rng, 2, 2, 3)
    bank = run_bank(pushed, BankSpec(capacity=5, policy="fifo"))
    assert bank.length == 2
    assert bank.read_tokens().shape == (1, 4, 3)


# --------------------------------------------------------------------------
# merge compression vs oracle

def test_mbc_spec_example_identical_pair_merges():
    u = np.ones(3)
    w = np.array([1.0, -2.0, 0.5])
    bank = run_bank([np.stack([u]), np.stack([u]), np.stack([w])],
                    BankSpec(capacity=2, policy="mbc"))
    vals = bank.values()[:, 0, 0]
    assert np.array_equal(vals[0], u)          # mean of two identical copies
    assert np.array_equal(vals[1], w)
    assert bank.counts[:, 0, 0].tolist() == [2, 1]


def test_mbc_token_oracle_exact_200_banks():
    rng = np.random.default_rng(42)
    for trial in range(200):
        t = int(rng.integers(4, 14))
        cap = int(rng.integers(2, 6))
        n = int(rng.integers(1, 4))
        d = int(rng.integers(2, 6))
        pushed = random_pushes(rng, t, n, d, ties=(trial % 3 == 0))
        bank = run_bank(pushed, BankSpec(capacity=cap, policy="mbc"))
        want = mbc_token_oracle(pushed, cap)
        got = bank.values()[:, 0]
        for j in range(n):
            for s, (v, c, lo, hi) in enumerate(want[j]):
                assert got[s, j].tobytes() == v.tobytes(), f"trial {trial} slot {j} entry {s}"
                assert bank.counts[s, 0, j] == c
                assert bank.lo[s, 0, j] == lo
                assert bank.hi[s, 0, j] == hi


def test_mbc_frame_oracle_exact_200_banks():
    rng = np.random.default_rng(43)
    for trial in range(200):
        t = int(rng.integers(4, 14))
        cap = int(rng.integers(2, 6))
        pushed = random_pushes(rng, t, 2, 3, ties=(trial % 4 == 0))
        bank = run_bank(pushed, BankSpec(capacity=cap, policy="mbc", granularity="frame"))
        want = mbc_frame_oracle(pushed, cap)
        got = bank.values()[:, 0]
        for s, (v, c, lo, hi) in enumerate(want):
            assert got[s].tobytes() == v.tobytes(), f"trial {trial} entry {s}"
            assert np.all(bank.counts[s, 0] == c)
            assert np.all(bank.lo[s, 0] == lo)
            assert np.all(bank.hi[s, 0] == hi)


def test_token_vs_frame_granularity_differ():
    u = np.array([1.0, 0.0, 0.0])
    w = np.array([0.0, 1.0, 0.0])
    a = np.array([0.0, 0.0, 1.0])
    b = np.array([0.0, 1.0, 0.0]) * -1.0
    # slot 0 wants to merge its first pair (u,u); slot 1 its second pair (b,b)
    pushed = [np.stack([u, a]), np.stack([u, b]), np.stack([w, b])]
    tok = run_bank(pushed, BankSpec(capacity=2, policy="mbc", granularity="token"))
    frm = run_bank(pushed, BankSpec(capacity=2, policy="mbc", granularity="frame"))
    assert not np.array_equal(tok.values(), frm.values())
    # token level: slot 0 merged (u,u) -> [u, w]; slot 1 merged (b,b) -> [a, b]
    got = tok.values()[:, 0]
    assert np.array_equal(got[:, 0], np.stack([u, w]))
    assert np.array_equal(got[:, 1], np.stack([a, b]))


def test_mbc_weighted_merge_oracle_exact():
    rng = np.random.default_rng(44)
    for _ in range(60):
        pushed = random_pushes(rng, 10, 2, 3)
        spec = BankSpec(capacity=3, policy="mbc", weighted_merge=True)
        bank = run_bank(pushed, spec)
        want = mbc_token_oracle(pushed, 3, weighted=True)
        got = bank.values()[:, 0]
        for j in range(2):
            for s, (v, c, _, _) in enumerate(want[j]):
                assert got[s, j].tobytes() == v.tobytes()
                assert bank.counts[s, 0, j] == c


def test_batched_merging_matches_per_sample_runs():
    rng = np.random.default_rng(45)
    batch = [ [rng.standard_normal((3, 4)) for _ in range(8)] for _ in range(5) ]
    spec = BankSpec(capacity=3, policy="mbc")
    stacked = MemoryBank(spec, 3, 4)
    for t in range(8):
        stacked.push(tk.Tensor(np.stack([batch[b][t] for b in range(5)])))
    for b in range(5):
        single = run_bank(batch[b], spec)
        assert np.array_equal(stacked.values()[:, b], single.values()[:, 0])
        assert np.array_equal(stacked.counts[:, b], single.counts[:, 0])


# --------------------------------------------------------------------------
# structural invariants

def intervals_ok(bank: MemoryBank) -> bool:
    lo, hi, counts = bank.lo, bank.hi, bank.counts
    s = bank.length
    for b in range(lo.shape[1]):
        for j in range(lo.shape[2]):
            prev_hi = None
            for i in range(s):
                if lo[i, b, j] > hi[i, b, j]:
                    return False
                if counts[i, b, j] != hi[i, b, j] - lo[i, b, j] + 1:
                    return False
                if prev_hi is not None and lo[i, b, j] != prev_hi + 1:
                    return False
                prev_hi = hi[i, b, j]
    return True


def test_interval_monotonicity_property():
    rng = np.random.default_rng(46)
    for _ in range(100):
        t = int(rng.integers(3, 30))
        pushed = random_pushes(rng, t, 2, 3, ties=bool(rng.integers(0, 2)))
        gran = "token" if rng.integers(0, 2) else "frame"
        bank = run_bank(pushed, BankSpec(capacity=4, policy="mbc", granularity=gran))
        assert intervals_ok(bank)
        assert bank.hi[-1, 0, 0] == t and bank.lo[0, 0, 0] == 1


def test_weighted_merge_preserves_slot_mean():
    rng = np.random.default_rng(47)
    for _ in range(100):
        t = int(rng.integers(4, 25))
        pushed = random_pushes(rng, t, 2, 3)
        spec = BankSpec(capacity=3, policy="mbc", weighted_merge=True)
        bank = run_bank(pushed, spec)
        vals = bank.values()[:, 0]              # (S, N, D)
        counts = bank.counts[:, 0]              # (S, N)
        for j in range(2):
            surv = (vals[:, j] * counts[:, j, None]).sum(axis=0) / counts[:, j].sum()
            want = np.stack([g[j] for g in pushed]).mean(axis=0)
            assert np.max(np.abs(surv - want)) < 1e-9


def test_bank_stays_bounded_over_long_stream():
    rng = np.random.default_rng(48)
    for policy in ("fifo", "mbc"):
        bank = MemoryBank(BankSpec(capacity=10, policy=policy), 2, 3)
        for _ in range(1000):
            bank.push(tk.Tensor(rng.standard_normal((1, 2, 3))))
        assert bank.length == 10
        assert bank.read_tokens().shape == (1, 20, 3)
        assert bank.state_floats() == 10 * 2 * 3


# --------------------------------------------------------------------------
# gradient boundary

def _push_loss(bank: MemoryBank, items: list[tk.Tensor]) -> tk.Tensor:
    for it in items:
        bank.push(it)
    out = bank.read_tokens()
    return tk.reduce_sum(tk.mul(out, out))


def test_detached_history_blocks_gradient():
    rng = np.random.default_rng(49)
    x1 = tk.Tensor(rng.standard_normal((1, 2, 3)), requires_grad=True)
    x2 = tk.Tensor(rng.standard_normal((1, 2, 3)), requires_grad=True)
    bank = MemoryBank(BankSpec(capacity=4, detach_history=True), 2, 3)
    with tk.GradientTape() as tape:
        loss = _push_loss(bank, [x1, x2])
    tape.backward(loss)
    assert x1.grad is None          # history frozen
    assert np.any(x2.grad != 0.0)   # current entry live


def test_live_history_passes_gradient():
    rng = np.random.default_rng(50)
    x1 = tk.Tensor(rng.standard_normal((1, 2, 3)), requires_grad=True)
    x2 = tk.Tensor(rng.standard_normal((1, 2, 3)), requires_grad=True)
    bank = MemoryBank(BankSpec(capacity=4, detach_history=False), 2, 3)
    with tk.GradientTape() as tape:
        loss = _push_loss(bank, [x1, x2])
    tape.backward(loss)
    assert np.any(x1.grad != 0.0)
    assert np.any(x2.grad != 0.0)


def test_merged_current_entry_keeps_gradient():
    # capacity 1 forces the current entry to merge with history immediately
    base = np.ones((1, 1, 3))
    x = tk.Tensor(base.copy(), requires_grad=True)
    bank = MemoryBank(BankSpec(capacity=1, policy="mbc", detach_history=True), 1, 3)
    bank.push(tk.Tensor(base.copy()))
    with tk.GradientTape() as tape:
        bank.push(x)
        loss = tk.reduce_sum(bank.read_tokens())
    tape.backward(loss)
    assert np.allclose(x.grad, 0.5)  # averaged into the surviving entry


def test_push_shape_errors():
    bank = MemoryBank(BankSpec(capacity=2), 2, 3)
    with pytest.raises(DimensionError):
        bank.push(tk.Tensor(np.zeros((1, 3, 3))))
    bank.push(tk.Tensor(np.zeros((2, 2, 3))))
    with pytest.raises(DimensionError):
        bank.push(tk.Tensor(np.zeros((1, 2, 3))))  # batch size changed
    with pytest.raises(DimensionError):
        MemoryBank(BankSpec(capacity=0), 1, 1)
