"""Template-based dynamic neural SDF reconstruction at desk scale."""

import os

# the TBB layer shipped with some numba wheels warns on import; workqueue is
# always available and sufficient for the data-parallel kernels here
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
