"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

`bounded_hop_pairs` enumerates all unordered node pairs within a hop budget;
it dominates CIA-LRA training time, so it has a Cython implementation with a
behaviour-identical numpy fallback. `IMPL` names the selected backend.
"""

try:
    from goodlab._kernels._hoppairs import IMPL, bounded_hop_pairs
except ImportError:
    from goodlab._kernels.fallback import IMPL, bounded_hop_pairs

__all__ = ["bounded_hop_pairs", "IMPL"]
