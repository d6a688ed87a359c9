"""Worker-count plumbing for the JSPL_THREADS environment variable."""

from __future__ import annotations

import os


def requested_threads() -> int:
    """Value of JSPL_THREADS; 0 (or unset) means automatic."""
    raw = os.environ.get("JSPL_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"JSPL_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ValueError("JSPL_THREADS must be >= 0")
    return n


def apply_thread_env() -> None:
    """Cap numba's pool before numba starts its threading layer."""
    # the built-in work queue is always available and needs no TBB/OpenMP probe
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    n = requested_threads()
    if n > 0 and "NUMBA_NUM_THREADS" not in os.environ:
        os.environ["NUMBA_NUM_THREADS"] = str(n)


def set_threads() -> int:
    """Apply JSPL_THREADS to the running numba pool; returns the count used."""
    import numba

    n = requested_threads()
    if n == 0 or n > numba.config.NUMBA_NUM_THREADS:
        n = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(n)
    return n
