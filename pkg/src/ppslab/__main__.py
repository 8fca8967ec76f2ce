"""Entry point for python -m ppslab."""
import sys
from ppslab.core import main

if __name__ == '__main__':
    sys.exit(main())
