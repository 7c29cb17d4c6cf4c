"""Python bindings for the cavlab simulator, sequence model and RSU service."""

from ._cavlab import *  # noqa: F401,F403
from ._cavlab import __version__  # noqa: F401
