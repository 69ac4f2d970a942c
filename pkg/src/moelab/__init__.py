"""Desk-scale dense vs mixture-of-experts transformer laboratory.

Subpackages:
    autodiff  -- reverse-mode autodiff over f64 tensors
    models    -- dense/MoE transformer forward passes and parameter accounting
    tasks     -- seeded generators for graph, phone-book and memorization data
    theory    -- explicit constructions (length-2 circuit, sign-routed memorizer)
                 with brute-force verifiers
    training  -- AdamW + warmup/linear-decay training and exact-match evaluation
    sweep     -- grid sweep runner with CSV records and resume manifest
    report    -- trend summaries and SVG plots
    cli       -- command-line front end (``moelab`` entry point)
"""

import os as _os

# The model matrices here are far too small for intra-op BLAS threading to
# pay off; thread pools also fight the sweep's process-level parallelism and
# can make runs an order of magnitude slower on small machines. Pin BLAS to
# one thread unless the user explicitly configured it (must happen before
# numpy first loads its BLAS backend).
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
