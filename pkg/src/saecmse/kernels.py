"""Kernel dispatch: compiled extension if available, NumPy fallback otherwise.

The hot inner loops of the fitting and Monte-Carlo code call ``gt_score``,
``gt_score_and_info`` and ``ml_negloglik`` through this module.  Set the
environment variable ``SAECMSE_PURE_PYTHON=1`` to force the fallback (used
by the benchmark and the twin-equivalence tests).
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _core as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

_FORCE_PURE = os.environ.get("SAECMSE_PURE_PYTHON", "") not in ("", "0")

HAVE_COMPILED = _compiled is not None
USING_COMPILED = HAVE_COMPILED and not _FORCE_PURE

_impl = _compiled if USING_COMPILED else _kernels_py

gt_score = _impl.gt_score
gt_score_and_info = _impl.gt_score_and_info
ml_negloglik = _impl.ml_negloglik

# The block-array helper is only needed outside the hot loops; the NumPy
# version is always used.
area_blocks = _kernels_py.area_blocks
link_mean = _kernels_py.link_mean
