"""Out-of-core tiled QR factorization and solve, with a fan-beam CT
reconstruction pipeline built on top of it.

Matrices live on disk as directories of fixed-size square tiles and are
staged through a bounded write-back LRU cache, so systems far larger than
memory can be factored once and solved for many right-hand sides.
"""

from .tile_store import TileCache, TiledMatrix, TileId
from .task_engine import EngineConfig, RunReport, factorize, solve

__version__ = "0.1.0"

__all__ = [
    "TileCache",
    "TiledMatrix",
    "TileId",
    "EngineConfig",
    "RunReport",
    "factorize",
    "solve",
    "__version__",
]
