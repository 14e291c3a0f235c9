"""Doubly-stochastic attention kernels.

Thin re-export of the compiled module. Installed wheels place the extension
inside this package; in-tree test runs put it on sys.path directly.
"""

try:
    from ._espattn import *  # noqa: F401,F403
    from ._espattn import __doc__ as _core_doc
except ImportError:  # build-tree layout: extension sits beside the package dir
    from _espattn import *  # noqa: F401,F403
    from _espattn import __doc__ as _core_doc

__all__ = [
    "soft_sort",
    "hard_sort_permutation",
    "soft_sort_grad",
    "slice_plan",
    "esp_plan",
    "interpolation_matrix",
    "cross_plan",
    "sinkhorn_plan",
    "exact_ot_oracle",
    "esp_attention",
    "esp_attention_grad",
    "softmax_attention",
    "sinkhorn_attention",
    "differential_attention",
    "temperature_at",
]
