from typing import Any, Callable, Dict, Sequence, Union

import numpy as np

PointLike = Union[float, Sequence[float], np.ndarray]

# (n, d) -> (n,)
ScalarField = Callable[[np.ndarray], np.ndarray]

# (t, x[n, d], mu) -> (n, d) and (t, x[n, d], mu) -> (n, d, m)
DriftFn = Callable[[float, np.ndarray, Any], np.ndarray]
DiffusionFn = Callable[[float, np.ndarray, Any], np.ndarray]

StatsDict = Dict[str, Any]
