"""Python bindings for the ehrseq core library."""

from ._ehrseq import *  # noqa: F401,F403
from ._ehrseq import __doc__  # noqa: F401
