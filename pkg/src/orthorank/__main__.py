"""Module entry point: python -m orthorank."""

import sys

from .cli import main

sys.exit(main())
