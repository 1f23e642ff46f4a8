"""Pin the numeric libraries to one thread before numpy is first imported.

Single-threaded kernels keep the timing criteria honest and the training
runs bit-reproducible on any host.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
