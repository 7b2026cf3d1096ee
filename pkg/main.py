#!/usr/bin/env python3
"""robustq - Train small quantized networks that hold up under attack.

Runs the command-line interface; see ``python main.py --help``.
"""

import os
import sys

# one BLAS thread per process; evaluation parallelism comes from worker threads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from robustq.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
