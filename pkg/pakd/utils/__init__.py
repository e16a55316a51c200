from . import file
from . import stats

__all__ = ["file", "stats"]
