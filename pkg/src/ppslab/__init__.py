"""ppslab: connection states and weak values for pre- and post-selected measurements."""

from ppslab._version import __version__
from ppslab.core import main

__all__ = ['main', '__version__']
