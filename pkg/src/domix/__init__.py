"""Multi-domain translation with word-level, layer-wise domain mixing."""

import os as _os

# Cap intra-op BLAS threads before numpy is first imported anywhere in the
# package. Has no effect if numpy was already loaded by the host process.
_threads = _os.environ.get("DOMIX_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
