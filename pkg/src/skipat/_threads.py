"""BLAS thread-count pinning via the SKAT_THREADS environment variable.

Must run before numpy is first imported; BLAS libraries read their thread
environment variables exactly once at load time. SKAT_THREADS=1 gives the
strictly deterministic single-threaded mode.
"""

import os
import sys

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def apply_thread_cap() -> None:
    cap = os.environ.get("SKAT_THREADS")
    if not cap:
        return
    if "numpy" in sys.modules:
        # Too late to influence BLAS; leave whatever the host configured.
        return
    for var in _BLAS_VARS:
        os.environ.setdefault(var, cap)


apply_thread_cap()
