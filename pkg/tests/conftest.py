import math

import numpy as np

from rand25d.autodiff import finite_diff_check


def fd_over_seeds(make_case, seeds, h=1e-3, need=1):
    """Finite-difference errors for each seed whose probes stay off every kink.

    ``make_case(rng)`` returns ``(f, x0)``. At least ``need`` seeds must be
    kink-free so the check can never pass vacuously.
    """
    errs = []
    for seed in seeds:
        f, x0 = make_case(np.random.default_rng(seed))
        err = finite_diff_check(f, x0, h=h)
        if not math.isnan(err):
            errs.append(err)
    assert len(errs) >= need, f"only {len(errs)} of {len(seeds)} seeds were off-kink"
    return errs


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
