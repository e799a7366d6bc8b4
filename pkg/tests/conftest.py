import os

# keep BLAS single-threaded: faster for these small matrices and makes
# timing predictable on small CI boxes
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
