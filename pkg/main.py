"""
Softbound - convex and concave bounds on the softmax function.

This is the main entry point for the command-line tool.
"""

import sys

from softbound.cli import main


if __name__ == '__main__':
    sys.exit(main())
