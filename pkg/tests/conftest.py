"""Pins BLAS to one thread before numpy loads so every test runs in the
strictly deterministic single-threaded mode."""

import os

os.environ.setdefault("SKAT_THREADS", "1")
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, os.environ["SKAT_THREADS"])
