"""Quick property suites behind ``kamamba selfcheck``."""
from __future__ import annotations

import itertools

import torch

from .gradcheck import module_fd_check
from .sparse import rowcol_topk_union
from .ssm import SelectiveMambaBlock, SsmParams, discretize, kernel_apply, scan


def random_ssm(gen: torch.Generator, max_state: int = 16, max_io: int = 3):
    """Random stable diagonal SSM, sizes drawn from ``gen``."""
    def draw(lo, hi):
        return int(torch.randint(lo, hi + 1, (1,), generator=gen))

    n, m1, m2 = draw(1, max_state), draw(1, max_io), draw(1, max_io)
    A = -torch.rand(n, generator=gen, dtype=torch.float64) * 2
    B = torch.randn(n, m1, generator=gen, dtype=torch.float64)
    C = torch.randn(m2, n, generator=gen, dtype=torch.float64)
    delta = float(torch.rand(1, generator=gen, dtype=torch.float64)) * 0.5 + 0.01
    return discretize(SsmParams(A, B, C, delta))


def check_path_equivalence(count: int = 20, seed: int = 0, max_len: int = 64):
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(count):
        ssm = random_ssm(gen)
        length = int(torch.randint(1, max_len + 1, (1,), generator=gen))
        x = torch.randn(length, ssm.in_dim, generator=gen, dtype=torch.float64)
        y_scan, y_conv = scan(ssm, x), kernel_apply(ssm, x)
        dev = float((y_scan - y_conv).abs().max()) / (1 + float(y_scan.abs().max()))
        worst = max(worst, dev)
    return worst <= 1e-6, f"max relative deviation {worst:.2e} over {count} systems"


def check_block_gradients(seed: int = 0):
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(seed)
        block = SelectiveMambaBlock(4, d_state=4)
        x = torch.randn(2, 8, 4, requires_grad=True)
        w = torch.randn(2, 8, 4)
        results = module_fd_check(block, lambda: (block(x) * w).sum(), {"x": x})
    finally:
        torch.set_default_dtype(prev)
    worst = max(results, key=lambda r: r.rel_error)
    return all(r.ok for r in results), f"worst FD error {worst.rel_error:.2e} ({worst.name})"


def check_mask_predicate(max_n: int = 24, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    for n in range(4, max_n + 1):
        am = torch.softmax(torch.randn(1, n, n, generator=gen, dtype=torch.float64), dim=-1)
        sel, mask = rowcol_topk_union(am, 0.3)
        members = set(sel.kept(0))
        for i, j in itertools.product(range(n), repeat=2):
            if bool(mask[0, i, j]) != (i in members or j in members):
                return False, f"mask mismatch at n={n}, ({i}, {j})"
    return True, f"mask predicate exhaustive for n = 4..{max_n}"


SUITES = {
    "scan/kernel equivalence": check_path_equivalence,
    "selective block gradients": check_block_gradients,
    "sparse mask predicate": check_mask_predicate,
}


def run_all():
    results = []
    for name, fn in SUITES.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # report, don't crash the CLI
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
