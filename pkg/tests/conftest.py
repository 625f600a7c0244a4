import os
import sys

# Pin BLAS threading before numpy loads: small desk-scale matrices gain
# nothing from threads, and a single thread keeps timings stable.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
